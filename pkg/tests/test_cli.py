import json
import os
import subprocess
import sys

import pytest

from cosim import cli
from cosim import scenarios


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data) if not isinstance(data, str) else data)
    return str(path)


def run_cli(*argv):
    return cli.main(list(argv))


def test_run_ok_prints_summary(tmp_path, capsys):
    cfg = write_config(tmp_path, {"scenario": "local_lg", "duration_s": 20, "seed": 1})
    assert run_cli("run", "--config", cfg, "--out", str(tmp_path / "o")) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["status"] == "ok"
    assert "bridge_log.csv" in out["outputs"]
    assert (tmp_path / "o" / "manifest.json").exists()


def test_seed_and_mode_overrides(tmp_path):
    cfg = write_config(tmp_path, {"scenario": "local_lg", "duration_s": 5, "seed": 1, "mode": "realtime"})
    assert run_cli("run", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "9", "--mode", "virtual") == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert (manifest["seed"], manifest["mode"]) == (9, "virtual")


@pytest.mark.parametrize("data,fragment", [
    ({"scenario": "local_lg", "seed": 1, "duration_s": -1}, "duration_s"),
    ({"scenario": "warp", "seed": 1}, "scenario"),
    ({"scenario": "local_lg"}, "seed is required"),
    ({"scenario": "vpn_td", "seed": 1, "vpn_td": {"update_cycle": {"kind": "uniform", "lo": 0.03, "hi": 0.01}}},
     "vpn_td.update_cycle"),
    ({"scenario": "local_lg", "seed": 1, "local_lg": {"polling": 1}}, "local_lg.polling"),
    ({"scenario": "local_lg", "seed": 1, "transport": {"kind": "fileshare"}}, "transport.kind"),
    ("{not json", "invalid JSON"),
])
def test_config_errors_exit_2_with_field(tmp_path, capsys, data, fragment):
    cfg = write_config(tmp_path, data)
    assert run_cli("run", "--config", cfg, "--out", str(tmp_path / "o")) == 2
    assert fragment in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert run_cli("run", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_bad_arguments_exit_2(capsys):
    assert run_cli_exit("run") == 2
    assert run_cli_exit("analyze", "--in", "x", "--report", "speed") == 2


def run_cli_exit(*argv):
    try:
        return cli.main(list(argv))
    except SystemExit as exc:
        return exc.code


def test_runtime_failure_exit_3_with_error_manifest(tmp_path, monkeypatch, capsys):
    def boom(cfg, out):
        (out / "partial.csv").write_text("t_us\n0\n")
        raise RuntimeError("simulator crashed")

    monkeypatch.setitem(scenarios.RUNNERS, "local_lg", boom)
    cfg = write_config(tmp_path, {"scenario": "local_lg", "seed": 1})
    assert run_cli("run", "--config", cfg, "--out", str(tmp_path / "o")) == 3
    assert "simulator crashed" in capsys.readouterr().err
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["status"] == "error"
    assert "partial.csv" in manifest["outputs"]
    assert "RuntimeError" in manifest["error"]


def test_analyze_requires_run_directory(tmp_path, capsys):
    assert run_cli("analyze", "--in", str(tmp_path), "--report", "latency") == 2
    assert "manifest" in capsys.readouterr().err


def test_analyze_missing_trace_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path, {"scenario": "local_lg", "duration_s": 5, "seed": 1,
                                  "local_lg": {"write_truth": False}})
    out = tmp_path / "o"
    assert run_cli("run", "--config", cfg, "--out", str(out)) == 0
    capsys.readouterr()
    assert run_cli("analyze", "--in", str(out), "--report", "fidelity") == 2
    assert "rts_truth.csv" in capsys.readouterr().err


@pytest.fixture(scope="module")
def local_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("local")
    cfg = scenarios.parse_config({"scenario": "local_lg", "duration_s": 120, "seed": 2})
    scenarios.run_scenario(cfg, out)
    return out


@pytest.mark.parametrize("report", ["latency", "fidelity", "decompose"])
def test_analyze_reports(local_run, capsys, report):
    assert run_cli("analyze", "--in", str(local_run), "--report", report) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["report"] == report
    for name in result["files"]:
        assert (local_run / name).stat().st_size > 0


def _cosim_cmd():
    return [sys.executable, "-m", "cosim.cli"]


def test_log_level_from_environment(tmp_path):
    cfg = write_config(tmp_path, {"scenario": "vpn_td", "duration_s": 0.3, "seed": 1, "vpn_td": {"fault": None},
                                  "smoothers": ["zoh"]})
    args = _cosim_cmd() + ["run", "--config", cfg, "--out", str(tmp_path / "o")]
    quiet = subprocess.run(args, capture_output=True, text=True, env={**os.environ, "COSIM_LOG_LEVEL": "WARNING"})
    loud = subprocess.run(args, capture_output=True, text=True, env={**os.environ, "COSIM_LOG_LEVEL": "INFO"})
    assert quiet.returncode == loud.returncode == 0
    assert "INFO" not in quiet.stderr
    assert "INFO cosim.scenarios.vpn_td" in loud.stderr
