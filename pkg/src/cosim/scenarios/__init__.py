"""Scenario runners: each writes traces, a latency CSV and a manifest."""

from __future__ import annotations

import logging
import traceback
from pathlib import Path

from . import fileshare_loadfollow, local_lg, vpn_td
from .common import MANIFEST, RunResult, load_manifest, write_manifest
from .config import ConfigError, ScenarioConfig, load_config, parse_config

log = logging.getLogger(__name__)

RUNNERS = {
    "local_lg": local_lg.run,
    "fileshare_loadfollow": fileshare_loadfollow.run,
    "vpn_td": vpn_td.run,
}


class ScenarioFailed(RuntimeError):
    """The run raised; partial outputs and an error manifest were written."""


def run_scenario(cfg: ScenarioConfig, out: str | Path) -> dict:
    """Run ``cfg`` into ``out`` and return the manifest.

    Config problems raise :class:`ConfigError` before anything is written.
    Any other failure leaves an error manifest and raises
    :class:`ScenarioFailed`.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.echo()
    result = RunResult()
    try:
        result = RUNNERS[cfg.scenario](cfg, out)
    except ConfigError:
        raise
    except Exception as exc:
        log.exception("scenario %s failed", cfg.scenario)
        # whatever was written so far stays in place and is hashed
        result.outputs = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != MANIFEST)
        write_manifest(out, echo, result, status="error", error=f"{type(exc).__name__}: {exc}",
                       extra={"traceback": traceback.format_exc()})
        raise ScenarioFailed(str(exc)) from exc
    write_manifest(out, echo, result)
    return load_manifest(out)


__all__ = [
    "ConfigError",
    "RUNNERS",
    "ScenarioConfig",
    "ScenarioFailed",
    "load_config",
    "load_manifest",
    "parse_config",
    "run_scenario",
]
