"""Remote load following through a synced shared directory.

Site A publishes its node powers into the share once per publish period.
The sync delay is drawn from the transport latency model. Site B polls the
share, its management system mirrors the received powers, and its nodes
follow the commands.
"""

from __future__ import annotations

import logging
import math
import shutil
import threading
import time
from pathlib import Path

import numpy as np

from ..core_time import US_PER_S, LatencyLedger, RealtimeClock, Scheduler, seconds_to_us
from ..federates import McsConfig, McsState, mcs_step
from ..signals import TimestampedSample
from ..transport import FileSharePublisher, FileShareWatcher, Frame, FrameKind, stream_rng
from .common import RunResult, write_rows
from .config import ConfigError, ScenarioConfig

log = logging.getLogger(__name__)

DELAY_COLUMNS = ("write_seq", "write_sim_time_us", "sync_delay_us", "visible_us", "seen_us", "cycle_us",
                 "size_bytes")
FOLLOW_COLUMNS = ("t_us", "source_total_w", "following_total_w", "max_abs_error_w", "last_seq")


class NodeProfile:
    """Deterministic per-node power: base plus a slow sinusoid."""

    def __init__(self, n: int, seed: int, p_min: float, p_max: float) -> None:
        rng = stream_rng(seed, "fileshare:nodes")
        self.ids = [f"p_node_{i:03d}" for i in range(n)]
        self.base = np.array([rng.uniform(p_min, p_max) for _ in range(n)])
        self.amp = np.array([rng.uniform(0.05, 0.2) for _ in range(n)])
        self.period_s = np.array([rng.uniform(600.0, 3600.0) for _ in range(n)])
        self.phase = np.array([rng.uniform(0.0, 2 * math.pi) for _ in range(n)])

    def at(self, t_us: int) -> np.ndarray:
        t = t_us / US_PER_S
        return self.base * (1.0 + self.amp * np.sin(2 * math.pi * t / self.period_s + self.phase))


class _Site:
    def __init__(self, cfg: ScenarioConfig, share: Path, clock, scheduler: Scheduler | None,
                 ledger: LatencyLedger) -> None:
        spec = cfg.fileshare
        self.clock = clock
        self.nodes = NodeProfile(spec.n_nodes, cfg.seed or 0, spec.node_p_min_w, spec.node_p_max_w)
        self.publisher = FileSharePublisher(share, "site_a", clock, cfg.transport.latency.model(), cfg.seed or 0,
                                            scheduler=scheduler)
        self.watcher = FileShareWatcher(share, clock, ignore={"site_b"}, ledger=ledger)
        self.mcs = McsState(McsConfig(rule="load_following", interval_us=seconds_to_us(cfg.steps.mcs_interval_s),
                                      follow_map={i: "set_" + i for i in self.nodes.ids}, sender_id="site_b_mcs"))
        self.following = np.zeros(spec.n_nodes)
        self.index = {"set_" + n: i for i, n in enumerate(self.nodes.ids)}
        self.seen: dict[int, tuple[int, int]] = {}
        self.follow_rows: list[tuple] = []
        self.last_seq = 0
        self._seq = 0

    def publish(self, now: int) -> None:
        self._seq += 1
        powers = self.nodes.at(now)
        samples = tuple(TimestampedSample(n, now, float(p)) for n, p in zip(self.nodes.ids, powers))
        self.publisher.publish([Frame(FrameKind.MEASUREMENT, self._seq, "site_a", now, samples)])

    def watch(self, now: int) -> None:
        for ev in self.watcher.poll_events():
            self.seen[ev.record.write_seq] = (ev.seen_at, ev.size_bytes)
            self.last_seq = ev.record.write_seq
            for frame in ev.record.frames:
                cmd = mcs_step(self.mcs, frame, now=ev.seen_at)
                if cmd is None:
                    continue
                for s in cmd.samples:
                    self.following[self.index[s.signal_id]] = s.value

    def sample(self, now: int) -> None:
        src = self.nodes.at(now)
        self.follow_rows.append((now, float(src.sum()), float(self.following.sum()),
                                 float(np.abs(src - self.following).max()), self.last_seq))

    def delay_rows(self) -> list[tuple]:
        rows = []
        for r in self.publisher.receipts:
            seen_at, size = self.seen.get(r.write_seq, (-1, r.size_bytes))
            cycle = seen_at - r.write_sim_time if seen_at >= 0 else -1
            rows.append((r.write_seq, r.write_sim_time, r.sync_delay_us, r.visible_at, seen_at, cycle, size))
        return rows


def _prepare(cfg: ScenarioConfig, out: Path) -> Path:
    if cfg.transport.kind != "fileshare":
        raise ConfigError("transport.kind: fileshare_loadfollow needs the fileshare transport")
    share = out / "share"
    if share.exists():
        shutil.rmtree(share)
    share.mkdir(parents=True)
    return share


def _finish(cfg: ScenarioConfig, out: Path, result: RunResult, site: _Site, ledger: LatencyLedger) -> None:
    rows = site.delay_rows()
    result.add(write_rows(out / "fileshare_delays.csv", DELAY_COLUMNS, rows))
    result.add(write_rows(out / "follow_trace.csv", FOLLOW_COLUMNS, site.follow_rows))
    path = out / "latency.csv"
    ledger.to_csv(path)
    result.add(path)
    delays = np.array([r[2] for r in rows], dtype=float) / US_PER_S
    model = cfg.transport.latency.model()
    result.summary = {
        "publishes": len(rows),
        "seen": sum(1 for r in rows if r[4] >= 0),
        "gaps": site.watcher.gaps,
        "corrupt": list(site.watcher.corrupt),
        "record_bytes": rows[0][6] if rows else 0,
        "sync_delay_s": {
            "min": float(delays.min()) if delays.size else None,
            "max": float(delays.max()) if delays.size else None,
            "mean": float(delays.mean()) if delays.size else None,
            "analytic_mean": model.mean,
            "bounds": list(model.bounds),
        },
        "mcs_stale": site.mcs.stale,
    }
    result.synthetic = ["node power profiles: seeded sinusoids (synthetic)",
                        "cloud sync: shared directory with injected delay"]


def run_virtual(cfg: ScenarioConfig, out: Path) -> RunResult:
    share = _prepare(cfg, out)
    spec = cfg.fileshare
    result = RunResult()
    sched = Scheduler()
    ledger = LatencyLedger()
    site = _Site(cfg, share, sched, sched, ledger)
    dur = cfg.duration_us
    period = seconds_to_us(spec.publish_period_s)
    # last publish at dur - period leaves one period for it to arrive
    n_pub = spec.publish_cycles or max(1, dur // period)
    for k in range(n_pub):
        sched.call_at(k * period, site.publish, k * period, priority=5)
    sched.every(seconds_to_us(spec.watch_period_s), site.watch, priority=10)
    sched.every(seconds_to_us(spec.trace_period_s), site.sample, priority=20)
    end = max(dur, (n_pub - 1) * period + seconds_to_us(cfg.transport.latency.model().bounds[1])
              + seconds_to_us(spec.watch_period_s))
    sched.run(until_us=end)
    _finish(cfg, out, result, site, ledger)
    return result


def run_realtime(cfg: ScenarioConfig, out: Path) -> RunResult:
    share = _prepare(cfg, out)
    spec = cfg.fileshare
    result = RunResult()
    clock = RealtimeClock()
    ledger = LatencyLedger()
    site = _Site(cfg, share, clock, None, ledger)
    stop = threading.Event()
    lock = threading.Lock()

    def loop(period_s: float, fn) -> None:
        period = seconds_to_us(period_s)
        next_t = 0
        while not stop.is_set():
            wait = (next_t - clock.now()) / US_PER_S
            if wait > 0 and stop.wait(wait):
                return
            with lock:
                fn(clock.now())
            next_t += period

    threads = [threading.Thread(target=loop, args=a, daemon=True) for a in (
        (spec.publish_period_s, site.publish), (spec.watch_period_s, site.watch), (spec.trace_period_s, site.sample))]
    for t in threads:
        t.start()
    time.sleep(cfg.duration_s)
    stop.set()
    for t in threads:
        t.join(2.0)
    site.publisher.close()
    _finish(cfg, out, result, site, ledger)
    return result


def run(cfg: ScenarioConfig, out: Path) -> RunResult:
    return run_virtual(cfg, out) if cfg.mode == "virtual" else run_realtime(cfg, out)
