"""Simulation time, clocks, and latency bookkeeping.

All simulation time is carried as an integer count of microseconds since
scenario start. Two clock flavours exist:

* :class:`Scheduler` doubles as the virtual clock. Time only moves when the
  scheduler pops the next event, so runs are deterministic.
* :class:`RealtimeClock` slaves simulation time to the host monotonic clock
  and also reports UTC wall time.

:class:`SyncedClock` layers an offset on top of either, so a component can
adopt the simulator's embedded time as its global clock.
"""

from __future__ import annotations

import csv
import enum
import heapq
import itertools
import threading
import time
from bisect import insort
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Protocol

US_PER_S = 1_000_000
US_PER_MS = 1_000


def seconds_to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


def us_to_seconds(us: int) -> float:
    return us / US_PER_S


class ClockViolation(ValueError):
    """A stamp pair or clock read went backwards."""


class IncompleteCycle(ValueError):
    """A ledger slice does not contain every leg of one cycle."""


class Clock(Protocol):
    def now(self) -> int: ...

    def wall_time(self) -> datetime | None: ...


# ---------------------------------------------------------------------------
# Clocks


class Scheduler:
    """Discrete-event scheduler and virtual clock.

    Events fire in (time, priority, insertion order). Lower priority values
    fire first when timestamps tie, which lets data deliveries land before the
    periodic step that consumes them.
    """

    def __init__(self) -> None:
        self._now = 0
        self._queue: list[tuple[int, int, int, Callable, tuple]] = []
        self._counter = itertools.count()
        self._stopped = False

    def now(self) -> int:
        return self._now

    def wall_time(self) -> datetime | None:
        return None

    def call_at(self, t_us: int, fn: Callable, *args, priority: int = 10) -> None:
        if t_us < self._now:
            raise ClockViolation(f"cannot schedule at {t_us} us, clock is at {self._now} us")
        heapq.heappush(self._queue, (int(t_us), priority, next(self._counter), fn, args))

    def call_later(self, delay_us: int, fn: Callable, *args, priority: int = 10) -> None:
        if delay_us < 0:
            raise ClockViolation(f"negative delay {delay_us} us")
        self.call_at(self._now + int(delay_us), fn, *args, priority=priority)

    def every(self, period_us: int, fn: Callable, *, start_us: int = 0, priority: int = 10) -> None:
        """Call ``fn(now)`` every ``period_us`` starting at ``start_us``."""
        if period_us <= 0:
            raise ValueError("period must be positive")

        def tick() -> None:
            fn(self._now)
            self.call_at(self._now + period_us, tick, priority=priority)

        self.call_at(start_us, tick, priority=priority)

    def stop(self) -> None:
        self._stopped = True

    def pending(self) -> int:
        return len(self._queue)

    def run(self, until_us: int | None = None) -> int:
        """Process events up to and including ``until_us``; return the final time."""
        self._stopped = False
        queue = self._queue
        while queue and not self._stopped:
            t = queue[0][0]
            if until_us is not None and t > until_us:
                break
            _, _, _, fn, args = heapq.heappop(queue)
            self._now = t
            fn(*args)
        if until_us is not None and not self._stopped and self._now < until_us:
            self._now = until_us
        return self._now


class RealtimeClock:
    """Simulation time bound to the host monotonic clock."""

    def __init__(self) -> None:
        self._t0 = time.monotonic_ns()
        self._lock = threading.Lock()
        self._last = 0

    def now(self) -> int:
        t = (time.monotonic_ns() - self._t0) // 1000
        with self._lock:
            if t < self._last:
                t = self._last
            self._last = t
        return t

    def wall_time(self) -> datetime | None:
        return datetime.now(timezone.utc)

    def sleep_until(self, t_us: int) -> None:
        delay = t_us - self.now()
        if delay > 0:
            time.sleep(delay / US_PER_S)


class SyncedClock:
    """A base clock shifted so that it agrees with an external time source.

    ``sync(reference_us)`` declares that the reference reads ``reference_us``
    right now. Reads never go backwards, even if a later sync would pull the
    estimate back.
    """

    def __init__(self, base: Clock) -> None:
        self.base = base
        self._offset = 0
        self._last = 0
        self._lock = threading.Lock()
        self.synced = False

    def sync(self, reference_us: int, base_at: int | None = None) -> None:
        """Adopt ``reference_us`` as the time at base instant ``base_at`` (default: now)."""
        with self._lock:
            at = self.base.now() if base_at is None else base_at
            self._offset = int(reference_us) - at
            self.synced = True

    def now(self) -> int:
        with self._lock:
            t = max(self.base.now() + self._offset, self._last, 0)
            self._last = t
            return t

    def wall_time(self) -> datetime | None:
        return self.base.wall_time()


# ---------------------------------------------------------------------------
# Step configuration


@dataclass(frozen=True)
class StepConfig:
    ts_emt_us: int = 100
    ts_phasor_us: int = 1_000
    mcs_interval_us: int = 300 * US_PER_S

    def __post_init__(self) -> None:
        if self.ts_emt_us <= 0 or self.ts_phasor_us <= 0 or self.mcs_interval_us <= 0:
            raise ValueError("all step sizes must be positive")
        if self.ts_emt_us >= self.ts_phasor_us:
            raise ValueError("ts_emt must be shorter than ts_phasor")
        if self.ts_phasor_us % self.ts_emt_us:
            raise ValueError("ts_phasor must be an integer multiple of ts_emt")
        if self.mcs_interval_us > 300 * US_PER_S:
            raise ValueError("mcs_interval must not exceed 5 minutes")


def propagation_bound(ts_phasor_us: int, ts_emt_us: int) -> int:
    """Worst-case EMT/phasor propagation delay, ``2*ts_phasor + ts_emt``.

    Takes raw step sizes rather than a :class:`StepConfig` so that degenerate
    inputs (a zero EMT step) can still be evaluated.
    """
    if ts_phasor_us < 0 or ts_emt_us < 0:
        raise ValueError("step sizes must be non-negative")
    return 2 * ts_phasor_us + ts_emt_us


# ---------------------------------------------------------------------------
# Latency ledger


class Leg(str, enum.Enum):
    RTS_TO_IFACE = "rts_to_iface"
    IFACE_PROCESS_UP = "iface_process_up"
    IFACE_TO_MCS = "iface_to_mcs"
    MCS_COMPUTE = "mcs_compute"
    MCS_TO_IFACE = "mcs_to_iface"
    IFACE_PROCESS_DOWN = "iface_process_down"
    IFACE_TO_RTS = "iface_to_rts"
    FILESHARE_CYCLE = "fileshare_cycle"
    SOCKET_ONEWAY = "socket_oneway"


# Order of the local round trip, RTS measurement to command execution.
LOCAL_CYCLE = (
    Leg.RTS_TO_IFACE,
    Leg.IFACE_PROCESS_UP,
    Leg.IFACE_TO_MCS,
    Leg.MCS_COMPUTE,
    Leg.MCS_TO_IFACE,
    Leg.IFACE_PROCESS_DOWN,
    Leg.IFACE_TO_RTS,
)
COMMUNICATION_LEGS = (Leg.RTS_TO_IFACE, Leg.IFACE_TO_MCS, Leg.MCS_TO_IFACE, Leg.IFACE_TO_RTS)
PROCESSING_LEGS = (Leg.IFACE_PROCESS_UP, Leg.IFACE_PROCESS_DOWN)


@dataclass(frozen=True)
class LatencyRecord:
    leg: Leg
    send: int
    recv: int

    def __post_init__(self) -> None:
        if self.recv < self.send:
            raise ClockViolation(f"{self.leg.value}: recv {self.recv} us precedes send {self.send} us")

    @property
    def latency(self) -> int:
        return self.recv - self.send


def _by_recv(rec: LatencyRecord) -> int:
    return rec.recv


class LatencyLedger:
    """Append-only list of latency records, kept sorted by receive stamp."""

    CSV_COLUMNS = ("leg", "send_us", "recv_us", "latency_us")

    def __init__(self) -> None:
        self._records: list[LatencyRecord] = []
        self._lock = threading.Lock()

    def record_leg(self, leg: Leg | str, send: int, recv: int) -> LatencyRecord:
        rec = LatencyRecord(Leg(leg), int(send), int(recv))
        with self._lock:
            if not self._records or rec.recv >= self._records[-1].recv:
                self._records.append(rec)
            else:
                insort(self._records, rec, key=_by_recv)
        return rec

    def records(self, leg: Leg | str | None = None) -> list[LatencyRecord]:
        with self._lock:
            recs = list(self._records)
        if leg is None:
            return recs
        leg = Leg(leg)
        return [r for r in recs if r.leg is leg]

    def __len__(self) -> int:
        return len(self._records)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_COLUMNS)
            for r in self.records():
                w.writerow((r.leg.value, r.send, r.recv, r.latency))

    @classmethod
    def from_csv(cls, path: str | Path) -> "LatencyLedger":
        ledger = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                ledger.record_leg(row["leg"], int(row["send_us"]), int(row["recv_us"]))
        return ledger


def record_leg(ledger: LatencyLedger, leg: Leg | str, send: int, recv: int) -> LatencyRecord:
    return ledger.record_leg(leg, send, recv)


@dataclass(frozen=True)
class DelayBreakdown:
    legs: dict[Leg, int]
    total: int
    end_to_end: int
    start: int
    end: int

    @property
    def additive(self) -> bool:
        return self.total == self.end_to_end

    def group(self, legs: Iterable[Leg]) -> int:
        return sum(self.legs.get(leg, 0) for leg in legs)


def decompose(records: Iterable[LatencyRecord], cycle: tuple[Leg, ...] = LOCAL_CYCLE) -> DelayBreakdown:
    """Per-leg latencies of one complete cycle plus its end-to-end span.

    ``total`` is the sum of the legs and ``end_to_end`` runs from the first
    leg's send stamp to the last leg's receive stamp. The two agree exactly
    when the legs are contiguous, which holds for every virtual-time run.
    """
    by_leg: dict[Leg, LatencyRecord] = {}
    for rec in records:
        if rec.leg not in cycle:
            continue
        if rec.leg in by_leg:
            raise IncompleteCycle(f"leg {rec.leg.value} appears twice in one cycle")
        by_leg[rec.leg] = rec
    missing = [leg.value for leg in cycle if leg not in by_leg]
    if missing:
        raise IncompleteCycle(f"cycle is missing legs: {', '.join(missing)}")
    legs = {leg: by_leg[leg].latency for leg in cycle}
    first, last = by_leg[cycle[0]], by_leg[cycle[-1]]
    return DelayBreakdown(
        legs=legs,
        total=sum(legs.values()),
        end_to_end=last.recv - first.send,
        start=first.send,
        end=last.recv,
    )


def split_cycles(records: Iterable[LatencyRecord], cycle: tuple[Leg, ...] = LOCAL_CYCLE) -> list[list[LatencyRecord]]:
    """Chop a recv-ordered ledger into consecutive runs of ``cycle`` legs.

    A run that starts but never finishes (or is interrupted by a restart of
    the sequence) is returned as-is, so :func:`decompose` reports it rather
    than silently dropping it.
    """
    cycles: list[list[LatencyRecord]] = []
    current: list[LatencyRecord] = []
    for rec in records:
        if rec.leg not in cycle:
            continue
        if rec.leg is cycle[0] and current:
            cycles.append(current)
            current = []
        current.append(rec)
        if rec.leg is cycle[-1]:
            cycles.append(current)
            current = []
    if current:
        cycles.append(current)
    return cycles
