"""Sequential load-group energization through the local interface.

The management system runs a step schedule that energizes one load group
per spacing interval. Commands travel interface -> Modbus -> simulator, and
the interface logs the resulting measurements once per poll period.
"""

from __future__ import annotations

import logging
import threading
import time
from pathlib import Path

import numpy as np

from ..bridge import Bridge, BridgeConfig, LegDelays, VirtualBridgeRunner, connect_bridge, replay_log, signal_map
from ..core_time import LOCAL_CYCLE, LatencyLedger, RealtimeClock, Scheduler, decompose, seconds_to_us, split_cycles
from ..federates import RTS_MEASUREMENTS, McsConfig, McsFederate, McsServer, RtsConfig, RtsEmulator
from ..modbus import DirectTransport, ModbusClient
from ..transport import LoopbackLink
from .common import RunResult, write_columns, write_rows
from .config import ConfigError, ScenarioConfig

log = logging.getLogger(__name__)

LOG_NAME = "bridge_log.csv"
TRUTH_NAME = "rts_truth.csv"
COMMITS_NAME = "rts_commits.csv"


def rts_config(cfg: ScenarioConfig) -> RtsConfig:
    spec = cfg.local_lg
    return RtsConfig(
        ts_us=cfg.steps.ts_phasor_us,
        group_p_w=tuple(spec.group_p_w),
        base_p_w=spec.base_p_w,
        pickup_tau_s=spec.pickup_tau_s,
    )


def mcs_config(cfg: ScenarioConfig, n_groups: int) -> McsConfig:
    spec = cfg.local_lg
    return McsConfig(
        rule="step_schedule",
        interval_us=seconds_to_us(spec.mcs_interval_s),
        compute_us=spec.mcs_compute_us,
        n_groups=n_groups,
        group_spacing_us=seconds_to_us(spec.group_spacing_s),
    )


def bridge_config(cfg: ScenarioConfig, rts: RtsConfig, out: Path, **endpoints) -> BridgeConfig:
    spec = cfg.local_lg
    return BridgeConfig(
        poll_period=spec.poll_period_s,
        forward_period=spec.forward_period_s,
        measurements=list(RTS_MEASUREMENTS),
        commands=rts.commands,
        log_path=str(out / LOG_NAME),
        jsonl_log=spec.jsonl_log,
        **endpoints,
    )


def _check(cfg: ScenarioConfig) -> None:
    if cfg.transport.kind == "fileshare":
        raise ConfigError("transport.kind: local_lg needs a socket or loopback transport")


def _finish(cfg: ScenarioConfig, out: Path, result: RunResult, bridge: Bridge, rts: RtsEmulator,
            ledger: LatencyLedger, mcs_stats: dict) -> None:
    result.add(Path(bridge.log.path))
    result.add(bridge.log.disposition_path(bridge.log.path))
    if cfg.local_lg.jsonl_log:
        result.add(Path(bridge.log.path).with_suffix(".jsonl"))
    path = out / "latency.csv"
    ledger.to_csv(path)
    result.add(path)
    result.add(write_rows(out / COMMITS_NAME, ("commit_us", "signal_id", "value"), rts.commits))
    if cfg.local_lg.write_truth:
        t, cols = rts.ground_truth(cfg.duration_us)
        result.add(write_columns(out / TRUTH_NAME, {"t_us": t, **cols}))
    series = replay_log(bridge.log.path)
    cycles = [c for c in split_cycles(ledger.records(), LOCAL_CYCLE) if len(c) == len(LOCAL_CYCLE)]
    additive = 0
    for c in cycles:
        try:
            additive += decompose(c).additive
        except ValueError:
            pass
    s = bridge.stats
    result.summary = {
        "upstream_entries": int(bridge.log.seq["up"]),
        "downstream_entries": int(bridge.log.seq["down"]),
        "polls": s.polls,
        "poll_timeouts": s.poll_timeouts,
        "poll_errors": s.poll_errors,
        "forwards": s.forwards,
        "disconnects": s.disconnects,
        "reconnects": s.reconnects,
        "commands_written": s.commands_written,
        "commands_dropped": s.commands_dropped,
        "malformed_frames": s.malformed_frames,
        "log_skipped_lines": series.skipped,
        "complete_cycles": len(cycles),
        "additive_cycles": additive,
        "power_steps_s": detect_steps(series, cfg),
        **mcs_stats,
    }
    result.synthetic = ["feeder model: base load plus five first-order load groups (synthetic)"]


def detect_steps(series, cfg: ScenarioConfig) -> list[float]:
    """Sample times (s) where logged power jumps by more than half the smallest group."""
    if "p_w" not in series:
        return []
    t = series["p_w"]["sim_time_us"]
    p = series["p_w"]["value"]
    if p.size < 2:
        return []
    threshold = 0.5 * min(cfg.local_lg.group_p_w)
    jumps = np.nonzero(np.abs(np.diff(p)) > threshold)[0] + 1
    return [float(t[i]) / 1e6 for i in jumps]


def run_virtual(cfg: ScenarioConfig, out: Path) -> RunResult:
    _check(cfg)
    spec = cfg.local_lg
    result = RunResult()
    sched = Scheduler()
    ledger = LatencyLedger()
    rcfg = rts_config(cfg)
    rts = RtsEmulator(rcfg, sched, signal_map(RTS_MEASUREMENTS, rcfg.commands))
    link = LoopbackLink(sched, cfg.transport.latency.model(), cfg.seed, name="local_lg:mcs")
    bcfg = bridge_config(cfg, rcfg, out)
    modbus = ModbusClient(DirectTransport(rts.server), bcfg.bindings(), bcfg.unit_id)
    bridge = Bridge(bcfg, modbus, link.a, sched, ledger)
    runner = VirtualBridgeRunner(bridge, sched, LegDelays(
        spec.rts_to_iface_us, spec.iface_process_up_us, spec.iface_process_down_us, spec.iface_to_rts_us))
    mcs = McsFederate(mcs_config(cfg, len(rcfg.group_p_w)), sched, link.b, ledger)
    runner.start()
    if spec.outage is not None:
        start = seconds_to_us(spec.outage.start_s)
        sched.call_at(start, link.set_down, True, priority=0)
        sched.call_at(start + seconds_to_us(spec.outage.duration_s), link.set_down, False, priority=0)
    try:
        sched.run(until_us=cfg.duration_us)
    finally:
        runner.finish()
    _finish(cfg, out, result, bridge, rts, ledger, {
        "mcs_received": mcs.received, "mcs_dispatched": mcs.state.dispatched,
        "mcs_send_failures": mcs.send_failures, "mcs_stale": mcs.state.stale,
    })
    return result


def run_realtime(cfg: ScenarioConfig, out: Path) -> RunResult:
    _check(cfg)
    spec = cfg.local_lg
    result = RunResult()
    clock = RealtimeClock()
    ledger = LatencyLedger()
    rcfg = rts_config(cfg)
    rts = RtsEmulator(rcfg, clock, signal_map(RTS_MEASUREMENTS, rcfg.commands))
    host, port = rts.server.serve(cfg.transport.host, 0)
    mcs = McsServer(mcs_config(cfg, len(rcfg.group_p_w)), clock, cfg.transport.host, cfg.transport.port,
                    ledger=ledger).start()
    bcfg = bridge_config(cfg, rcfg, out, modbus_endpoint=f"{host}:{port}",
                         mcs_endpoint=f"{mcs.address[0]}:{mcs.address[1]}")
    bridge = connect_bridge(bcfg, clock, ledger)
    timers = []
    try:
        bridge.start()
        if spec.outage is not None:
            t = threading.Timer(spec.outage.start_s, mcs.drop, args=(spec.outage.duration_s,))
            t.daemon = True
            t.start()
            timers.append(t)
        time.sleep(cfg.duration_s)
    finally:
        for t in timers:
            t.cancel()
        bridge.stop()
        mcs.stop()
        rts.server.shutdown()
    _finish(cfg, out, result, bridge, rts, ledger, {
        "mcs_received": mcs.received, "mcs_dispatched": mcs.state.dispatched,
        "mcs_send_failures": mcs.send_failures, "mcs_stale": mcs.state.stale,
    })
    return result


def run(cfg: ScenarioConfig, out: Path) -> RunResult:
    return run_virtual(cfg, out) if cfg.mode == "virtual" else run_realtime(cfg, out)
