"""Command-line entry point.

    cosim run --config <file> --out <dir> [--seed N] [--mode virtual|realtime]
    cosim analyze --in <dir> --report latency|fidelity|decompose

Exit codes: 0 success, 2 configuration or input error, 3 runtime error.
The log level comes from ``COSIM_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("cosim")


def _setup_logging() -> None:
    level_name = os.environ.get("COSIM_LOG_LEVEL", "WARNING").upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 already; keep the message format
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cosim", description="Co-simulation scenario runner and analyzer")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="run a scenario from a JSON config")
    run.add_argument("--config", required=True, help="scenario config (JSON)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--mode", choices=("virtual", "realtime"), default=None, help="override the config mode")
    an = sub.add_parser("analyze", help="build a report from a run directory")
    an.add_argument("--in", dest="input", required=True, help="run directory (contains manifest.json)")
    an.add_argument("--report", required=True, choices=("latency", "fidelity", "decompose"))
    return parser


def cmd_run(args) -> int:
    from .scenarios import ConfigError, ScenarioFailed, load_config, run_scenario

    try:
        cfg = load_config(args.config, seed=args.seed, mode=args.mode)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run_scenario(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioFailed as exc:
        print(f"runtime error: {exc} (partial outputs in {args.out})", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"status": manifest["status"], "out": str(args.out), "outputs": sorted(manifest["outputs"]),
                      "summary": manifest["summary"]}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import AnalysisError, analyze

    try:
        result = analyze(args.input, args.report)
    except AnalysisError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.exception("analysis failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    return cmd_analyze(args)


if __name__ == "__main__":
    sys.exit(main())
