"""Post-run reports: latency statistics, reconstruction fidelity, delay legs.

Everything needed is read from the run directory, starting with its
manifest. Each report writes a CSV and an SVG next to the traces.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import svg
from .bridge import replay_log
from .core_time import (
    COMMUNICATION_LEGS,
    LOCAL_CYCLE,
    PROCESSING_LEGS,
    IncompleteCycle,
    LatencyLedger,
    Leg,
    decompose,
    propagation_bound,
    seconds_to_us,
    split_cycles,
)
from .signals import cross_correlation_lag, fidelity_metrics, total_variation

REPORTS = ("latency", "fidelity", "decompose")
MAX_LAG_S = 0.2


class AnalysisError(RuntimeError):
    """The run directory lacks something a report needs."""


# ---------------------------------------------------------------------------
# Shared helpers


def upsample_zoh(t_src, v_src, t) -> np.ndarray:
    """Value of a stepwise source at times ``t`` (held from the last source stamp)."""
    t_src = np.asarray(t_src)
    idx = np.searchsorted(t_src, np.asarray(t), side="right") - 1
    return np.asarray(v_src, dtype=float)[np.clip(idx, 0, len(t_src) - 1)]


def percentile_stats(values) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"count": 0, "min": None, "max": None, "mean": None, "p50": None, "p90": None, "p99": None}
    return {
        "count": int(v.size),
        "min": float(v.min()),
        "max": float(v.max()),
        "mean": float(v.mean()),
        "p50": float(np.percentile(v, 50)),
        "p90": float(np.percentile(v, 90)),
        "p99": float(np.percentile(v, 99)),
    }


def histogram_edges(values, bin_width: float | None = None, bins: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    lo, hi = (float(v.min()), float(v.max())) if v.size else (0.0, 1.0)
    if bin_width is None:
        if hi == lo:
            return np.array([lo - 0.5, hi + 0.5])
        return np.linspace(lo, hi, bins + 1)
    start = np.floor(lo / bin_width) * bin_width
    stop = max(np.ceil(hi / bin_width) * bin_width, start + bin_width)
    n = int(round((stop - start) / bin_width))
    return start + bin_width * np.arange(n + 1)


def _require(directory: Path, names) -> None:
    missing = [n for n in names if not (directory / n).exists()]
    if missing:
        raise AnalysisError(f"{directory}: missing trace file(s): {', '.join(missing)}")


def _manifest(directory: Path) -> dict:
    path = directory / "manifest.json"
    if not path.exists():
        raise AnalysisError(f"{directory}: no manifest.json; not a run directory")
    return json.loads(path.read_text())


def _columns(path: Path) -> dict[str, np.ndarray]:
    from .scenarios.common import read_columns

    return read_columns(path)


def _write_csv(path: Path, header, rows) -> Path:
    from .scenarios.common import write_rows

    return write_rows(path, header, rows)


# ---------------------------------------------------------------------------
# vpn_td metrics


def _windows(config: dict, t_end: int) -> tuple[tuple[int, int], tuple[int, int], int | None]:
    spec = config.get("vpn_td", {})
    fault = spec.get("fault")
    fault_us = seconds_to_us(fault["start_s"]) if fault else None
    lo, hi = spec.get("steady_window_s", (0.5, None))
    steady_hi = seconds_to_us(hi) if hi is not None else (fault_us if fault_us is not None else t_end)
    steady = (seconds_to_us(lo), steady_hi)
    a, b = spec.get("transient_window_s", (-0.1, 1.5))
    anchor = fault_us if fault_us is not None else 0
    transient = (max(0, anchor + seconds_to_us(a)), min(t_end, anchor + seconds_to_us(b)))
    return steady, transient, fault_us


def smoother_metrics(config: dict, t_tx, f_tx, v_tx, trace: dict[str, np.ndarray],
                     arrivals: dict[str, np.ndarray] | None = None) -> dict:
    t = trace["t_us"]
    ts_emt = int(config["steps"]["ts_emt_us"])
    steady, transient, _ = _windows(config, int(t[-1]) if t.size else 0)
    f_ref = upsample_zoh(t_tx, f_tx, t)
    v_ref = upsample_zoh(t_tx, v_tx, t)
    f_rec, f_pll, v_rec = trace["f_received"], trace["f_pll"], trace["v_reconstructed"]
    ms = (t >= steady[0]) & (t < steady[1])
    mt = (t >= transient[0]) & (t <= transient[1])
    max_lag = int(MAX_LAG_S * 1e6 / ts_emt)
    out = {
        "steady_pll_dev_ptp_hz": float(np.ptp((f_pll - f_rec)[ms])) if ms.any() else None,
        "steady_pll_ptp_hz": float(np.ptp(f_pll[ms])) if ms.any() else None,
    }
    if mt.sum() > 2:
        fid = fidelity_metrics(f_ref[mt], f_rec[mt], max_lag=max_lag)
        out.update({
            "freq_lag_ms": fid.lag * ts_emt / 1000.0,
            "freq_rmse_hz": fid.rmse,
            "freq_total_variation_hz": fid.total_variation,
            "pll_lag_ms": cross_correlation_lag(f_ref[mt], f_pll[mt], max_lag=max_lag) * ts_emt / 1000.0,
            "voltage_rmse_pu": float(np.sqrt(np.mean((v_rec[mt] - v_ref[mt]) ** 2))),
            "voltage_lag_ms": cross_correlation_lag(v_ref[mt], v_rec[mt], max_lag=max_lag) * ts_emt / 1000.0,
            "voltage_total_variation_pu": total_variation(v_rec[mt]),
        })
    if arrivals is not None and arrivals["arrival_us"].size:
        a = arrivals["arrival_us"]
        spacing = np.diff(a) / 1000.0
        out["arrivals"] = int(a.size)
        out["arrival_spacing_ms"] = {"min": float(spacing.min()), "max": float(spacing.max()),
                                     "mean": float(spacing.mean())} if spacing.size else None
        out["received_age_ms_mean"] = float(np.mean(a - arrivals["source_t_us"]) / 1000.0)
    return out


def vpn_metrics(config: dict, transmission_rows, traces: dict, arrivals: dict | None = None) -> dict:
    """Per-smoother fidelity summary; accepts row tuples or column dicts."""
    tx = _as_columns(transmission_rows, ("t_us", "v_mag", "freq"))
    result = {}
    for s, tr in traces.items():
        cols = _as_columns(tr, ("t_us", "f_received", "f_pll", "v_reconstructed", "p_w", "q_var"))
        arr = None
        if arrivals is not None and s in arrivals:
            arr = _as_columns(arrivals[s], ("arrival_us", "source_t_us", "v_mag", "freq"))
        result[s] = smoother_metrics(config, tx["t_us"], tx["freq"], tx["v_mag"], cols, arr)
    summary = {"smoothers": result}
    if "zoh" in result and "extrap" in result:
        z, e = result["zoh"]["steady_pll_dev_ptp_hz"], result["extrap"]["steady_pll_dev_ptp_hz"]
        if z:
            summary["extrap_to_zoh_steady_ptp_ratio"] = e / z
    return summary


def _as_columns(data, names) -> dict[str, np.ndarray]:
    if isinstance(data, dict):
        return data
    rows = list(data)
    if not rows:
        return {n: np.array([]) for n in names}
    cols = list(zip(*rows))
    return {n: np.asarray(c) for n, c in zip(names, cols)}


# ---------------------------------------------------------------------------
# Reports


def latency_report(directory: Path, manifest: dict) -> dict:
    _require(directory, ["latency.csv"])
    spec = manifest["config"].get("analysis", {})
    ledger = LatencyLedger.from_csv(directory / "latency.csv")
    sources: dict[str, np.ndarray] = {}
    for leg in Leg:
        recs = ledger.records(leg)
        if recs:
            sources[leg.value] = np.array([r.latency for r in recs], dtype=float)
    bin_width_s = spec.get("histogram_bin_s")
    if manifest["scenario"] == "fileshare_loadfollow":
        _require(directory, ["fileshare_delays.csv"])
        d = _columns(directory / "fileshare_delays.csv")
        sources = {"sync_delay": d["sync_delay_us"].astype(float), **sources}
        if bin_width_s is None:
            bin_width_s = 0.5
    if not sources:
        raise AnalysisError(f"{directory}: latency.csv has no records")
    stats_rows, hist_rows = [], []
    primary = next(iter(sources))
    hist_for_svg = None
    for name, vals in sources.items():
        st = percentile_stats(vals)
        stats_rows.append((name, st["count"], st["min"], st["max"], st["mean"], st["p50"], st["p90"], st["p99"]))
        width_us = bin_width_s * 1e6 if bin_width_s else None
        edges = histogram_edges(vals, width_us, spec.get("latency_bins", 20))
        counts, _ = np.histogram(vals, bins=edges)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            hist_rows.append((name, float(lo), float(hi), int(c)))
        if name == primary:
            hist_for_svg = (edges, counts)
    _write_csv(directory / "latency_report.csv",
               ("source", "count", "min_us", "max_us", "mean_us", "p50_us", "p90_us", "p99_us"), stats_rows)
    _write_csv(directory / "latency_histogram.csv", ("source", "bin_lo_us", "bin_hi_us", "count"), hist_rows)
    edges, counts = hist_for_svg
    (directory / "latency_histogram.svg").write_text(svg.histogram(
        edges / 1e6, counts, title=f"{primary} delay distribution", xlabel="delay (s)"))
    return {"report": "latency", "sources": {r[0]: dict(zip(
        ("count", "min_us", "max_us", "mean_us", "p50_us", "p90_us", "p99_us"), r[1:])) for r in stats_rows},
        "files": ["latency_report.csv", "latency_histogram.csv", "latency_histogram.svg"]}


def _fidelity_vpn(directory: Path, manifest: dict) -> dict:
    smoothers = manifest["config"]["smoothers"]
    needed = ["transmission.csv"] + [f"distribution_{s}.csv" for s in smoothers]
    _require(directory, needed)
    tx = _columns(directory / "transmission.csv")
    traces = {s: _columns(directory / f"distribution_{s}.csv") for s in smoothers}
    arrivals = {s: _columns(directory / f"arrivals_{s}.csv") for s in smoothers
                if (directory / f"arrivals_{s}.csv").exists()}
    summary = vpn_metrics(manifest["config"], tx, traces, arrivals)
    fields = ("freq_rmse_hz", "freq_lag_ms", "freq_total_variation_hz", "voltage_rmse_pu", "voltage_lag_ms",
              "steady_pll_dev_ptp_hz", "pll_lag_ms")
    rows = [(s, *(summary["smoothers"][s].get(f) for f in fields)) for s in smoothers]
    _write_csv(directory / "fidelity.csv", ("smoother", *fields), rows)
    _, transient, _ = _windows(manifest["config"], int(tx["t_us"][-1]))
    series = [("source", tx["t_us"] / 1e6, tx["freq"])]
    pll = []
    for s in smoothers:
        tr = traces[s]
        m = (tr["t_us"] >= transient[0]) & (tr["t_us"] <= transient[1])
        series.append((f"{s} received", tr["t_us"][m] / 1e6, tr["f_received"][m]))
        pll.append((f"{s} PLL", tr["t_us"][m] / 1e6, tr["f_pll"][m]))
    mtx = (tx["t_us"] >= transient[0]) & (tx["t_us"] <= transient[1])
    series[0] = ("source", tx["t_us"][mtx] / 1e6, tx["freq"][mtx])
    (directory / "fidelity.svg").write_text(svg.line_plot(
        series, title="Received frequency vs source", xlabel="time (s)", ylabel="frequency (Hz)"))
    (directory / "fidelity_pll.svg").write_text(svg.line_plot(
        pll, title="PLL frequency estimate", xlabel="time (s)", ylabel="frequency (Hz)"))
    return {"report": "fidelity", **summary, "files": ["fidelity.csv", "fidelity.svg", "fidelity_pll.svg"]}


def local_fidelity(directory: Path) -> dict:
    """Logged upstream values against the simulator's 1 ms truth at the logged instants."""
    _require(directory, ["bridge_log.csv", "rts_truth.csv"])
    truth = _columns(directory / "rts_truth.csv")
    series = replay_log(directory / "bridge_log.csv")
    out = {}
    for sid, col in truth.items():
        if sid == "t_us" or sid not in series:
            continue
        t = series[sid]["sim_time_us"]
        logged = series[sid]["value"]
        idx = np.searchsorted(truth["t_us"], t)
        if np.any(idx >= truth["t_us"].size) or np.any(truth["t_us"][np.minimum(idx, truth["t_us"].size - 1)] != t):
            raise AnalysisError(f"{sid}: logged sim_time not on the truth grid")
        ref = col[idx]
        quantized = ref.astype(np.float32).astype(float)
        err = np.abs(logged - ref)
        half_ulp = np.spacing(np.abs(ref).astype(np.float32)).astype(float) / 2
        out[sid] = {
            "samples": int(t.size),
            "rmse": float(np.sqrt(np.mean((logged - ref) ** 2))) if t.size else 0.0,
            "max_abs_error": float(err.max()) if t.size else 0.0,
            "within_quantization": bool(np.all(err <= half_ulp)) if t.size else True,
            "equals_quantized_truth": bool(np.array_equal(logged, quantized)),
            "lag_samples": cross_correlation_lag(ref, logged) if t.size > 1 else 0,
            "total_variation": total_variation(logged),
        }
    return out


def _fidelity_local(directory: Path, manifest: dict) -> dict:
    table = local_fidelity(directory)
    fields = ("samples", "rmse", "max_abs_error", "within_quantization", "lag_samples", "total_variation")
    _write_csv(directory / "fidelity.csv", ("signal_id", *fields),
               [(sid, *(v[f] for f in fields)) for sid, v in table.items()])
    truth = _columns(directory / "rts_truth.csv")
    logged = replay_log(directory / "bridge_log.csv")
    series = [("truth (1 ms)", truth["t_us"] / 1e6, truth["p_w"])]
    if "p_w" in logged:
        series.append(("logged (poll)", logged["p_w"]["sim_time_us"] / 1e6, logged["p_w"]["value"]))
    (directory / "fidelity.svg").write_text(svg.line_plot(
        series, title="Feeder power: logged vs truth", xlabel="time (s)", ylabel="P (W)"))
    return {"report": "fidelity", "signals": table, "files": ["fidelity.csv", "fidelity.svg"]}


def _fidelity_fileshare(directory: Path, manifest: dict) -> dict:
    _require(directory, ["follow_trace.csv"])
    tr = _columns(directory / "follow_trace.csv")
    m = tr["last_seq"] > 0
    fid = fidelity_metrics(tr["source_total_w"][m], tr["following_total_w"][m]) if m.sum() > 1 else None
    row = ("following_total_w", fid.rmse if fid else None, fid.lag if fid else None,
           fid.total_variation if fid else None)
    _write_csv(directory / "fidelity.csv", ("signal", "rmse", "lag_samples", "total_variation"), [row])
    (directory / "fidelity.svg").write_text(svg.line_plot(
        [("source total", tr["t_us"] / 1e6, tr["source_total_w"]),
         ("following total", tr["t_us"] / 1e6, tr["following_total_w"])],
        title="Remote load following", xlabel="time (s)", ylabel="P (W)"))
    return {"report": "fidelity", "rmse": row[1], "lag_samples": row[2], "files": ["fidelity.csv", "fidelity.svg"]}


def fidelity_report(directory: Path, manifest: dict) -> dict:
    scenario = manifest["scenario"]
    if scenario == "vpn_td":
        return _fidelity_vpn(directory, manifest)
    if scenario == "local_lg":
        return _fidelity_local(directory, manifest)
    return _fidelity_fileshare(directory, manifest)


def _leg_group(leg: Leg) -> str:
    if leg in COMMUNICATION_LEGS:
        return "communication"
    if leg in PROCESSING_LEGS:
        return "processing"
    if leg is Leg.MCS_COMPUTE:
        return "compute"
    return "transport"


def decompose_report(directory: Path, manifest: dict) -> dict:
    _require(directory, ["latency.csv"])
    ledger = LatencyLedger.from_csv(directory / "latency.csv")
    records = ledger.records()
    if not records:
        raise AnalysisError(f"{directory}: latency.csv has no records")
    cycles = []
    incomplete = 0
    if any(r.leg is LOCAL_CYCLE[0] for r in records):
        for chunk in split_cycles(records, LOCAL_CYCLE):
            try:
                cycles.append(decompose(chunk))
            except IncompleteCycle:
                incomplete += 1
    cycle_rows = [
        (i, c.start, *(c.legs[leg] for leg in LOCAL_CYCLE), c.total, c.end_to_end, c.additive)
        for i, c in enumerate(cycles)
    ]
    _write_csv(directory / "decompose.csv",
               ("cycle", "start_us", *(f"{leg.value}_us" for leg in LOCAL_CYCLE), "total_us", "end_to_end_us",
                "additive"), cycle_rows)
    leg_rows = []
    for leg in Leg:
        vals = [r.latency for r in ledger.records(leg)]
        if vals:
            st = percentile_stats(vals)
            leg_rows.append((leg.value, _leg_group(leg), st["count"], st["mean"], st["min"], st["max"]))
    _write_csv(directory / "decompose_legs.csv", ("leg", "group", "count", "mean_us", "min_us", "max_us"), leg_rows)
    (directory / "decompose.svg").write_text(svg.bar_chart(
        [r[0] for r in leg_rows], [r[3] / 1000.0 for r in leg_rows],
        title="Mean delay per leg", ylabel="delay (ms)"))
    steps = manifest["config"]["steps"]
    return {
        "report": "decompose",
        "cycles": len(cycles),
        "incomplete_cycles": incomplete,
        "all_additive": all(c.additive for c in cycles) if cycles else None,
        "legs_mean_us": {r[0]: r[3] for r in leg_rows},
        "propagation_bound_us": propagation_bound(steps["ts_phasor_us"], steps["ts_emt_us"]),
        "files": ["decompose.csv", "decompose_legs.csv", "decompose.svg"],
    }


def analyze(directory: str | Path, report: str) -> dict:
    directory = Path(directory)
    if report not in REPORTS:
        raise ValueError(f"unknown report {report!r}; expected one of {', '.join(REPORTS)}")
    manifest = _manifest(directory)
    fn = {"latency": latency_report, "fidelity": fidelity_report, "decompose": decompose_report}[report]
    return fn(directory, manifest)
