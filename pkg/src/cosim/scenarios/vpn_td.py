"""Transmission-distribution coupling over a latency-injected socket link.

Virtual mode runs each selected smoother in its own deterministic run with
the same seed, so every smoother sees the identical arrival schedule. In
realtime mode one receiving interface fans the same arrivals out to all
smoothers at once.
"""

from __future__ import annotations

import logging
import threading
from pathlib import Path

from ..analysis import vpn_metrics
from ..core_time import LatencyLedger, Leg, RealtimeClock, Scheduler, seconds_to_us
from ..federates import (
    ArrivalGate,
    DistributionConfig,
    DistributionFederate,
    FaultConfig,
    TransmissionConfig,
    TransmissionFederate,
    cycles_to_us,
)
from ..transport import DelayedSender, FramedListener, LoopbackLink, TransportDisconnected, connect
from .common import RunResult, write_rows
from .config import ConfigError, ScenarioConfig

log = logging.getLogger(__name__)

TRANSMISSION_COLUMNS = ("t_us", "v_mag", "freq")
DISTRIBUTION_COLUMNS = ("t_us", "f_received", "f_pll", "v_reconstructed", "p_w", "q_var")
ARRIVAL_COLUMNS = ("arrival_us", "source_t_us", "v_mag", "freq")
PQ_COLUMNS = ("rx_us", "sender_id", "p_w", "q_var")


def transmission_config(cfg: ScenarioConfig) -> TransmissionConfig:
    spec = cfg.vpn_td
    fault = None
    if spec.fault is not None:
        f = spec.fault
        fault = FaultConfig(
            start_us=seconds_to_us(f.start_s),
            duration_us=cycles_to_us(f.cycles, 60.0),
            residual_v=f.residual_v,
            swing_hz=f.swing_hz,
            swing_freq_hz=f.swing_freq_hz,
            swing_decay_s=f.swing_decay_s,
        )
    return TransmissionConfig(
        ts_phasor_us=cfg.steps.ts_phasor_us,
        ambient_hz=spec.ambient_hz,
        ambient_freq_hz=spec.ambient_freq_hz,
        fault=fault,
    )


def distribution_config(cfg: ScenarioConfig, smoother: str) -> DistributionConfig:
    sp = cfg.smoother_params
    return DistributionConfig(
        ts_emt_us=cfg.steps.ts_emt_us,
        pq_period_us=cfg.vpn_td.pq_period_us or cfg.steps.ts_phasor_us,
        smoother=smoother,
        lpf_tau_s=sp.lpf_tau_s,
        extrap_n=sp.extrap_n,
        extrap_k1=sp.extrap_k1,
        slope_clamp=sp.slope_clamp,
        p_nom_w=cfg.vpn_td.p_nom_w,
        q_nom_var=cfg.vpn_td.q_nom_var,
    )


def _check(cfg: ScenarioConfig) -> None:
    if cfg.transport.kind == "fileshare":
        raise ConfigError("transport.kind: vpn_td needs a socket or loopback transport")


def _write_outputs(out: Path, result: RunResult, transmission, dists: dict, ledger: LatencyLedger,
                   pq: list | None) -> None:
    result.add(write_rows(out / "transmission.csv", TRANSMISSION_COLUMNS, transmission))
    for s, d in dists.items():
        result.add(write_rows(out / f"distribution_{s}.csv", DISTRIBUTION_COLUMNS, d.trace))
        result.add(write_rows(out / f"arrivals_{s}.csv", ARRIVAL_COLUMNS, d.arrivals))
    if pq is not None:
        result.add(write_rows(out / "pq_feedback.csv", PQ_COLUMNS, pq))
    path = out / "latency.csv"
    ledger.to_csv(path)
    result.add(path)


def _summarize(cfg: ScenarioConfig, result: RunResult, transmission, dists: dict) -> None:
    result.synthetic = [
        "transmission frequency: ambient sinusoid plus damped post-fault swing (synthetic profile)",
        "distribution load: static constant-impedance P/Q equivalent",
    ]
    result.summary = vpn_metrics(cfg.echo(), transmission, {s: d.trace for s, d in dists.items()},
                                 {s: d.arrivals for s, d in dists.items()})


def run_virtual(cfg: ScenarioConfig, out: Path) -> RunResult:
    _check(cfg)
    result = RunResult()
    dur = cfg.duration_us
    tcfg = transmission_config(cfg)
    latency = cfg.transport.latency.model()
    cycle = cfg.vpn_td.update_cycle.model()
    dists: dict[str, DistributionFederate] = {}
    transmission_trace = None
    first_ledger = None
    pq = None
    for smoother in cfg.smoothers:
        sched = Scheduler()
        ledger = LatencyLedger()
        link = LoopbackLink(sched, latency, cfg.seed, name="vpn_td:link", ledger=ledger, leg=Leg.SOCKET_ONEWAY)
        tx = TransmissionFederate(tcfg, sched, link.a, until_us=dur)
        dist = DistributionFederate(distribution_config(cfg, smoother), sched, link.b, until_us=dur)
        gate = ArrivalGate(sched, dist.arrive, cycle, cfg.seed, name="vpn_td:gate", until_us=dur)
        link.b.listener = gate
        tx.start()
        gate.start()
        dist.start()
        sched.run(until_us=dur)
        dists[smoother] = dist
        if transmission_trace is None:
            transmission_trace, first_ledger, pq = tx.trace, ledger, tx.pq_received
        elif tx.trace != transmission_trace:
            raise RuntimeError("transmission traces differ between paired runs")
        log.info("vpn_td %s: %d arrivals, %d stale", smoother, len(dist.arrivals), dist.stale)
    arrivals = [d.arrivals for d in dists.values()]
    if any([a[:2] for a in x] != [a[:2] for a in arrivals[0]] for x in arrivals):
        raise RuntimeError("arrival schedules differ between paired runs")
    _write_outputs(out, result, transmission_trace, dists, first_ledger, pq)
    _summarize(cfg, result, transmission_trace, dists)
    return result


# ---------------------------------------------------------------------------
# Realtime


class _Slaved:
    """Runs a scheduler so that its virtual time trails the wall clock."""

    def __init__(self, scheduler: Scheduler, clock: RealtimeClock, until_us: int) -> None:
        self.scheduler = scheduler
        self.clock = clock
        self.until_us = until_us

    def run(self, stop: threading.Event, inject=None) -> None:
        while not stop.is_set():
            now = min(self.clock.now(), self.until_us)
            if inject is not None:
                inject(now)
            self.scheduler.run(until_us=now)
            if now >= self.until_us:
                return
            stop.wait(0.001)


class _SenderEndpoint:
    def __init__(self, sender: DelayedSender) -> None:
        self.sender = sender
        self.listener = None

    def send(self, frame) -> None:
        self.sender.send(frame)


def run_realtime(cfg: ScenarioConfig, out: Path) -> RunResult:
    _check(cfg)
    result = RunResult()
    seed = cfg.seed or 0
    dur = cfg.duration_us
    clock = RealtimeClock()
    latency = cfg.transport.latency.model()
    ledger = LatencyLedger()
    listener = FramedListener(cfg.transport.host, cfg.transport.port, clock)
    try:
        tx_conn = connect(*listener.address, clock=clock)
        rx_conn = listener.accept(timeout_s=2.0)
        if rx_conn is None:
            raise RuntimeError("distribution side never accepted the link")
        tx_send = DelayedSender(tx_conn, latency, seed, "vpn_td:link:a", clock)
        rx_send = DelayedSender(rx_conn, latency, seed, "vpn_td:link:b", clock)

        tx_sched, rx_sched = Scheduler(), Scheduler()
        tx_ep, rx_ep = _SenderEndpoint(tx_send), _SenderEndpoint(rx_send)
        tx = TransmissionFederate(transmission_config(cfg), tx_sched, tx_ep, until_us=dur)
        dists = {}
        for i, s in enumerate(cfg.smoothers):
            dists[s] = DistributionFederate(distribution_config(cfg, s), rx_sched, rx_ep if i == 0 else None,
                                            until_us=dur)

        def fan_out(frame, now):
            for d in dists.values():
                d.arrive(frame, now)

        gate = ArrivalGate(rx_sched, fan_out, cfg.vpn_td.update_cycle.model(), seed, name="vpn_td:gate",
                           until_us=dur)
        tx.start()
        gate.start()
        for d in dists.values():
            d.start()

        def injector(conn, sched, deliver):
            def inject(now):
                try:
                    timed = conn.poll_timed()
                except TransportDisconnected:
                    return
                for rx, frame in timed:
                    ledger.record_leg(Leg.SOCKET_ONEWAY, min(frame.send_sim_time, rx), rx)
                    sched.call_at(max(rx, sched.now()), deliver, frame, max(rx, sched.now()), priority=0)
            return inject

        stop = threading.Event()
        threads = [
            threading.Thread(target=_Slaved(tx_sched, clock, dur).run,
                             args=(stop, injector(tx_conn, tx_sched, tx._on_frame)), daemon=True),
            threading.Thread(target=_Slaved(rx_sched, clock, dur).run,
                             args=(stop, injector(rx_conn, rx_sched, gate)), daemon=True),
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join(cfg.duration_s + 30.0)
        stop.set()
        tx_send.close()
        rx_send.close()
        tx_conn.close()
        rx_conn.close()
    finally:
        listener.close()
    _write_outputs(out, result, tx.trace, dists, ledger, tx.pq_received)
    _summarize(cfg, result, tx.trace, dists)
    return result


def run(cfg: ScenarioConfig, out: Path) -> RunResult:
    return run_virtual(cfg, out) if cfg.mode == "virtual" else run_realtime(cfg, out)
