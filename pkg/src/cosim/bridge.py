"""Local communication interface between the simulator and the control system.

The interface is a Modbus client toward the simulator and a frame-socket
client toward the control system. Upstream it polls measurements, stamps them
with the simulator's embedded time, logs them and forwards the newest set.
Downstream it receives command frames, logs each command and writes it
through to the simulator.

:class:`Bridge` holds the protocol logic. :meth:`Bridge.start` runs it on
threads against the wall clock, and :class:`VirtualBridgeRunner` drives the
same methods from a :class:`~cosim.core_time.Scheduler`, where configured
leg latencies stand in for wire and processing time.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .core_time import US_PER_MS, Clock, LatencyLedger, Leg, Scheduler, SyncedClock, seconds_to_us
from .modbus import Binding, ModbusClient, ModbusError, ModbusTimeout, RegisterMap, float_map
from .signals import TimestampedSample
from .transport import Frame, FrameKind, TransportDisconnected, TransportTimeout

log = logging.getLogger(__name__)

SIM_TIME_SIGNAL = "sim_time"
LOG_COLUMNS = ("wall_time", "sim_time_us", "direction", "signal_id", "value", "seq")


@dataclass
class BridgeConfig:
    modbus_endpoint: str = "127.0.0.1:5020"
    mcs_endpoint: str = "127.0.0.1:8602"
    poll_period: float = 1.0
    forward_period: float | None = None
    measurements: list[str] = field(default_factory=list)
    commands: list[str] = field(default_factory=list)
    log_path: str = "bridge_log.csv"
    jsonl_log: bool = False
    sim_time_signal: str | None = SIM_TIME_SIGNAL
    unit_id: int = 1
    modbus_timeout_ms: int = 1000
    sender_id: str = "iface"
    reconnect_backoff: float = 0.5
    reconnect_backoff_max: float = 5.0
    # phase of the forward timer relative to the poll timer
    forward_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.forward_period is None:
            self.forward_period = self.poll_period
        if self.poll_period <= 0 or self.forward_period <= 0:
            raise ValueError("poll_period and forward_period must be positive")
        if not self.measurements:
            raise ValueError("at least one measurement signal is required")
        dup = set(self.measurements) & set(self.commands)
        if dup:
            raise ValueError(f"signals bound as both measurement and command: {sorted(dup)}")

    @classmethod
    def from_dict(cls, d: dict) -> "BridgeConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown bridge config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "BridgeConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def bindings(self) -> list[Binding]:
        """Register layout: sim_time (u32 ms), measurements, then commands."""
        return list(signal_map(self.measurements, self.commands, self.sim_time_signal).bindings.values())


def signal_map(measurements, commands=(), sim_time_signal: str | None = SIM_TIME_SIGNAL) -> RegisterMap:
    """The register map shared by the simulator side and the interface."""
    head = [sim_time_signal] if sim_time_signal else []
    dtypes = {sim_time_signal: "u32"} if sim_time_signal else {}
    return float_map(head + list(measurements), commands, dtypes=dtypes)


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {text!r}")
    return host, int(port)


# ---------------------------------------------------------------------------
# Log


class BridgeLog:
    """Append-only CSV log with per-direction sequence numbers.

    Command dispositions (written, or dropped with a reason) go to a JSONL
    sidecar next to the CSV, keyed by the CSV ``seq``.
    """

    def __init__(self, path: str | Path, clock_source: str = "sim_time", jsonl: bool = False) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        if clock_source != "sim_time":
            self._fh.write(f"# clock_source={clock_source}\n")
        self._csv.writerow(LOG_COLUMNS)
        self._disp = open(self.disposition_path(self.path), "w")
        self._jsonl = open(self.path.with_suffix(".jsonl"), "w") if jsonl else None
        self._lock = threading.Lock()
        self.seq = {"up": 0, "down": 0}
        self.last_sim_time = {"up": -1, "down": -1}
        self.closed = False

    @staticmethod
    def disposition_path(path: str | Path) -> Path:
        p = Path(path)
        return p.with_name(p.stem + ".commands.jsonl")

    def append(self, direction: str, signal_id: str, value: float, sim_time_us: int, wall_time=None) -> int:
        with self._lock:
            if self.closed:
                raise ValueError("log is closed")
            if sim_time_us < self.last_sim_time[direction]:
                sim_time_us = self.last_sim_time[direction]
            self.last_sim_time[direction] = sim_time_us
            self.seq[direction] += 1
            seq = self.seq[direction]
            wall = wall_time.isoformat() if wall_time is not None else ""
            self._csv.writerow((wall, sim_time_us, direction, signal_id, repr(float(value)), seq))
            if self._jsonl is not None:
                self._jsonl.write(json.dumps({
                    "wall_time": wall, "sim_time_us": sim_time_us, "direction": direction,
                    "signal_id": signal_id, "value": float(value), "seq": seq,
                }) + "\n")
            return seq

    def disposition(self, record: dict) -> None:
        with self._lock:
            if not self.closed:
                self._disp.write(json.dumps(record, sort_keys=True) + "\n")

    def flush(self) -> None:
        with self._lock:
            if not self.closed:
                self._fh.flush()
                self._disp.flush()
                if self._jsonl is not None:
                    self._jsonl.flush()

    def close(self) -> None:
        with self._lock:
            if self.closed:
                return
            self.closed = True
            for fh in (self._fh, self._disp, self._jsonl):
                if fh is not None:
                    fh.close()


class LogReplay(dict):
    """``signal_id -> {"sim_time_us": array, "value": array, "direction": str}``.

    ``skipped`` counts lines that failed to parse; ``clock_source`` echoes the
    header flag.
    """

    skipped: int = 0
    clock_source: str = "sim_time"


def replay_log(log_path: str | Path) -> LogReplay:
    series: dict[str, tuple[str, list[int], list[float]]] = {}
    out = LogReplay()
    path = Path(log_path)
    with open(path, newline="") as fh:
        header_seen = False
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key == "clock_source":
                    out.clock_source = val
                continue
            if not header_seen:
                header_seen = True
                if line.rstrip("\r\n").split(",") == list(LOG_COLUMNS):
                    continue
            try:
                row = next(csv.reader([line]))
                if len(row) != len(LOG_COLUMNS):
                    raise ValueError("wrong column count")
                _, t, direction, sid, value, seq = row
                t_us, v = int(t), float(value)
                int(seq)
                if direction not in ("up", "down") or not sid or not math.isfinite(v):
                    raise ValueError("bad field")
            except (ValueError, StopIteration):
                out.skipped += 1
                continue
            entry = series.setdefault(sid, (direction, [], []))
            entry[1].append(t_us)
            entry[2].append(v)
    for sid, (direction, ts, vs) in series.items():
        out[sid] = {
            "sim_time_us": np.asarray(ts, dtype=np.int64),
            "value": np.asarray(vs, dtype=float),
            "direction": direction,
        }
    return out


# ---------------------------------------------------------------------------
# Bridge core


@dataclass
class Snapshot:
    sim_time_us: int
    values: dict[str, float]
    requested_at: int
    ingested_at: int = -1
    seq: int = 0


@dataclass
class BridgeStats:
    polls: int = 0
    poll_timeouts: int = 0
    poll_errors: int = 0
    forwards: int = 0
    forward_failures: int = 0
    disconnects: int = 0
    reconnects: int = 0
    command_frames: int = 0
    commands_written: int = 0
    commands_dropped: int = 0
    malformed_frames: int = 0
    poll_times: deque = field(default_factory=lambda: deque(maxlen=200_000))


class Bridge:
    def __init__(self, config: BridgeConfig, modbus: ModbusClient, mcs, clock: Clock,
                 ledger: LatencyLedger | None = None, log_writer: BridgeLog | None = None) -> None:
        self.config = config
        self.modbus = modbus
        self.mcs = mcs
        self.base_clock = clock
        self.clock_source = "sim_time" if config.sim_time_signal else "local"
        self.clock: Clock = SyncedClock(clock) if config.sim_time_signal else clock
        self.ledger = ledger
        self.log = log_writer or BridgeLog(config.log_path, self.clock_source, config.jsonl_log)
        self.stats = BridgeStats()
        self.latest: Snapshot | None = None
        self._last_forwarded_seq = 0
        self._snap_seq = 0
        self._frame_seq = 0
        self.mcs_connected = True
        self._read_names = ([config.sim_time_signal] if config.sim_time_signal else []) + list(config.measurements)
        self._commands = set(config.commands)
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    # -- upstream --------------------------------------------------------

    def sample(self) -> Snapshot | None:
        """One Modbus read of every measurement; ``None`` when the cycle is skipped."""
        requested = self.base_clock.now()
        self.stats.polls += 1
        self.stats.poll_times.append(requested)
        try:
            values = self.modbus.read_values(self._read_names)
        except ModbusTimeout as exc:
            self.stats.poll_timeouts += 1
            log.warning("modbus poll timed out, skipping cycle: %s", exc)
            return None
        except ModbusError as exc:
            self.stats.poll_errors += 1
            log.warning("modbus poll failed, skipping cycle: %s", exc)
            return None
        if self.config.sim_time_signal:
            sim_t = int(values.pop(self.config.sim_time_signal)) * US_PER_MS
            self.clock.sync(sim_t, base_at=requested)
        else:
            sim_t = self.clock.now()
        return Snapshot(sim_t, {k: float(v) for k, v in values.items()}, requested)

    def ingest(self, snap: Snapshot) -> None:
        snap.ingested_at = self.base_clock.now()
        wall = self.base_clock.wall_time()
        for name in self.config.measurements:
            self.log.append("up", name, snap.values[name], snap.sim_time_us, wall)
        if self.ledger is not None:
            self.ledger.record_leg(Leg.RTS_TO_IFACE, snap.requested_at, snap.ingested_at)
        with self._lock:
            self._snap_seq += 1
            snap.seq = self._snap_seq
            self.latest = snap

    def poll_once(self) -> Snapshot | None:
        snap = self.sample()
        if snap is not None:
            self.ingest(snap)
        return snap

    def measurement_frame(self, snap: Snapshot) -> Frame:
        self._frame_seq += 1
        samples = tuple(TimestampedSample(n, snap.sim_time_us, snap.values[n]) for n in self.config.measurements)
        return Frame(FrameKind.MEASUREMENT, self._frame_seq, self.config.sender_id, self.clock.now(), samples)

    def forward_once(self) -> Frame | None:
        """Send the newest snapshot if it has not been forwarded yet."""
        with self._lock:
            snap = self.latest
            if snap is None or snap.seq == self._last_forwarded_seq:
                return None
        if not self.mcs_connected:
            return None
        frame = self.measurement_frame(snap)
        sent_at = self.base_clock.now()
        try:
            self.mcs.send(frame)
        except (TransportDisconnected, TransportTimeout) as exc:
            self.stats.forward_failures += 1
            self._mark_disconnected(exc)
            return None
        self._last_forwarded_seq = snap.seq
        self.stats.forwards += 1
        if self.ledger is not None:
            self.ledger.record_leg(Leg.IFACE_PROCESS_UP, snap.ingested_at, sent_at)
        return frame

    # -- MCS link --------------------------------------------------------

    def _mark_disconnected(self, exc: Exception) -> None:
        if self.mcs_connected:
            self.stats.disconnects += 1
            log.warning("MCS link lost: %s", exc)
        self.mcs_connected = False

    def try_reconnect(self) -> bool:
        try:
            self.mcs.reconnect()
        except (TransportDisconnected, OSError) as exc:
            log.debug("MCS reconnect failed: %s", exc)
            return False
        self.mcs_connected = True
        self.stats.reconnects += 1
        log.info("MCS link restored")
        return True

    # -- downstream ------------------------------------------------------

    def accept_commands(self, frame: Frame, received_at: int | None = None) -> list[dict]:
        """Log every command of ``frame``; return the ones that can be written."""
        rx = self.base_clock.now() if received_at is None else received_at
        self.stats.command_frames += 1
        if self.ledger is not None:
            self.ledger.record_leg(Leg.MCS_TO_IFACE, min(frame.send_sim_time, rx), rx)
        wall = self.base_clock.wall_time()
        t_log = self.clock.now()
        pending = []
        for s in frame.samples:
            seq = self.log.append("down", s.signal_id, s.value, t_log, wall)
            rec = {
                "seq": seq, "frame_seq": frame.seq, "sender_id": frame.sender_id,
                "signal_id": s.signal_id, "value": s.value, "command_sim_time_us": s.sim_time,
                "received_us": t_log,
            }
            if frame.kind is not FrameKind.COMMAND:
                self._drop(rec, f"frame kind {frame.kind.name.lower()} is not a command")
            elif s.signal_id not in self._commands:
                self._drop(rec, "signal is not a bound command")
            else:
                pending.append(rec)
        return pending

    def _drop(self, rec: dict, reason: str) -> None:
        rec = dict(rec, disposition="dropped", reason=reason)
        self.stats.commands_dropped += 1
        self.log.disposition(rec)

    def write_commands(self, pending: list[dict], received_at: int | None = None) -> bool:
        if not pending:
            return True
        issued = self.base_clock.now()
        if self.ledger is not None and received_at is not None:
            self.ledger.record_leg(Leg.IFACE_PROCESS_DOWN, received_at, issued)
        values = {}
        for rec in pending:
            values[rec["signal_id"]] = rec["value"]  # last one wins within a frame
        try:
            self.modbus.write_signals(values)
        except ModbusError as exc:
            for rec in pending:
                self._drop(rec, f"modbus write failed: {exc}")
            return False
        done = self.base_clock.now()
        if self.ledger is not None:
            self.ledger.record_leg(Leg.IFACE_TO_RTS, issued, done)
        for rec in pending:
            self.stats.commands_written += 1
            self.log.disposition(dict(rec, disposition="written", written_us=self.clock.now()))
        return True

    def handle_command_frame(self, frame: Frame, received_at: int | None = None) -> bool:
        rx = self.base_clock.now() if received_at is None else received_at
        return self.write_commands(self.accept_commands(frame, rx), rx)

    def handle_malformed(self, reason: str) -> None:
        self.stats.malformed_frames += 1
        self.log.disposition({"seq": None, "disposition": "dropped", "reason": f"malformed frame: {reason}",
                              "received_us": self.clock.now()})

    # -- realtime runner -------------------------------------------------

    def start(self) -> "Bridge":
        """Run upstream polling, forwarding and command handling on threads."""
        self._stop.clear()
        specs = [("bridge-poll", self._poll_loop), ("bridge-forward", self._forward_loop),
                 ("bridge-commands", self._command_loop)]
        for name, target in specs:
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self, timeout_s: float = 5.0) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout_s)
        self._threads.clear()
        self.log.flush()
        self.log.close()
        for ep in (self.modbus, self.mcs):
            try:
                ep.close()
            except Exception:  # noqa: BLE001 - shutdown must not raise
                log.debug("error closing %r", ep, exc_info=True)

    def _sleep_until(self, t_us: int) -> bool:
        """Wait on the base clock; False when asked to stop."""
        while not self._stop.is_set():
            remaining = t_us - self.base_clock.now()
            if remaining <= 0:
                return True
            self._stop.wait(min(remaining / 1e6, 0.05))
        return False

    def _poll_loop(self) -> None:
        period = seconds_to_us(self.config.poll_period)
        next_t = self.base_clock.now()
        while self._sleep_until(next_t):
            self.poll_once()
            next_t += period
            now = self.base_clock.now()
            if next_t <= now:
                # overran; realign to the cadence instead of bursting
                next_t += ((now - next_t) // period + 1) * period

    def _forward_loop(self) -> None:
        period = seconds_to_us(self.config.forward_period)
        next_t = self.base_clock.now() + seconds_to_us(self.config.forward_offset)
        backoff = self.config.reconnect_backoff
        while self._sleep_until(next_t):
            if not self.mcs_connected:
                if self.try_reconnect():
                    backoff = self.config.reconnect_backoff
                else:
                    next_t = self.base_clock.now() + seconds_to_us(backoff)
                    backoff = min(backoff * 2, self.config.reconnect_backoff_max)
                    continue
            self.forward_once()
            next_t += period
            now = self.base_clock.now()
            if next_t <= now:
                next_t += ((now - next_t) // period + 1) * period

    def _command_loop(self) -> None:
        while not self._stop.is_set():
            if not self.mcs_connected:
                self._stop.wait(0.01)
                continue
            wait = getattr(self.mcs, "wait_readable", None)
            if wait is not None:
                wait(0.05)
            else:
                self._stop.wait(0.005)
            try:
                timed = self.mcs.poll_timed()
            except TransportDisconnected as exc:
                self._mark_disconnected(exc)
                continue
            self._note_decode_errors()
            for rx, frame in timed:
                self.handle_command_frame(frame, rx if rx else None)

    def _note_decode_errors(self) -> None:
        buf = getattr(self.mcs, "buffer", None)
        if buf is None:
            return
        seen = getattr(self, "_decode_errors_seen", 0)
        while buf.decode_errors > seen:
            seen += 1
            self.handle_malformed(str(buf.last_error))
        self._decode_errors_seen = seen


def connect_bridge(config: BridgeConfig, clock: Clock, ledger: LatencyLedger | None = None) -> Bridge:
    """Build a realtime bridge from endpoint strings (MCS dial is lazy)."""
    from .modbus import TcpTransport
    from .transport import connect

    host, port = parse_endpoint(config.modbus_endpoint)
    modbus = ModbusClient(TcpTransport(host, port, config.modbus_timeout_ms), config.bindings(), config.unit_id)
    mhost, mport = parse_endpoint(config.mcs_endpoint)
    mcs = connect(mhost, mport, clock=clock, lazy=True)
    bridge = Bridge(config, modbus, mcs, clock, ledger)
    bridge.mcs_connected = False
    return bridge


def run(config: BridgeConfig, clock: Clock, ledger: LatencyLedger | None = None) -> Bridge:
    """Start a realtime bridge; call ``stop()`` on the returned handle."""
    return connect_bridge(config, clock, ledger).start()


# ---------------------------------------------------------------------------
# Virtual-time runner


@dataclass(frozen=True)
class LegDelays:
    """Virtual durations of the interface-side legs, in microseconds."""

    rts_to_iface: int = 200
    iface_process_up: int = 50
    iface_process_down: int = 50
    iface_to_rts: int = 200


class VirtualBridgeRunner:
    """Schedules a :class:`Bridge` on a virtual clock.

    The Modbus exchange itself is instantaneous in virtual time; the leg
    delays are realized by deferring the work that follows it. ``mcs`` must be
    a loopback endpoint (or anything with a ``listener`` attribute).
    """

    def __init__(self, bridge: Bridge, scheduler: Scheduler, delays: LegDelays = LegDelays(),
                 start_us: int = 0) -> None:
        self.bridge = bridge
        self.scheduler = scheduler
        self.delays = delays
        self.start_us = start_us
        self._backoff_us = seconds_to_us(bridge.config.reconnect_backoff)
        self._reconnect_pending = False

    def start(self) -> None:
        cfg = self.bridge.config
        poll = seconds_to_us(cfg.poll_period)
        fwd = seconds_to_us(cfg.forward_period)
        offset = seconds_to_us(cfg.forward_offset) or (self.delays.rts_to_iface + self.delays.iface_process_up)
        self.scheduler.every(poll, self._poll, start_us=self.start_us)
        self.scheduler.every(fwd, self._forward, start_us=self.start_us + offset)
        self.bridge.mcs.listener = self._on_frame

    def _poll(self, now: int) -> None:
        snap = self.bridge.sample()
        if snap is not None:
            self.scheduler.call_later(self.delays.rts_to_iface, self.bridge.ingest, snap)

    def _forward(self, now: int) -> None:
        b = self.bridge
        if not b.mcs_connected:
            self._schedule_reconnect()
            return
        b.forward_once()
        if not b.mcs_connected:
            self._schedule_reconnect()

    def _schedule_reconnect(self) -> None:
        if self._reconnect_pending:
            return
        self._reconnect_pending = True
        self.scheduler.call_later(self._backoff_us, self._reconnect)

    def _reconnect(self) -> None:
        self._reconnect_pending = False
        if self.bridge.mcs_connected:
            return
        if self.bridge.try_reconnect():
            self._backoff_us = seconds_to_us(self.bridge.config.reconnect_backoff)
        else:
            self._backoff_us = min(2 * self._backoff_us, seconds_to_us(self.bridge.config.reconnect_backoff_max))
            self._schedule_reconnect()

    def _on_frame(self, frame: Frame, rx: int) -> None:
        pending = self.bridge.accept_commands(frame, rx)
        if pending:
            self.scheduler.call_later(self.delays.iface_process_down, self._issue_write, pending, rx)

    def _issue_write(self, pending: list[dict], rx: int) -> None:
        b = self.bridge
        issued = self.scheduler.now()
        if b.ledger is not None:
            b.ledger.record_leg(Leg.IFACE_PROCESS_DOWN, rx, issued)
        self.scheduler.call_later(self.delays.iface_to_rts, self._commit_write, pending, issued)

    def _commit_write(self, pending: list[dict], issued: int) -> None:
        b = self.bridge
        ledger, b.ledger = b.ledger, None  # legs for this write are recorded here
        try:
            ok = b.write_commands(pending)
        finally:
            b.ledger = ledger
        if ok and ledger is not None:
            ledger.record_leg(Leg.IFACE_TO_RTS, issued, self.scheduler.now())

    def finish(self) -> None:
        self.bridge.log.flush()
        self.bridge.log.close()


def stamped_values(snapshot: Snapshot) -> Iterable[TimestampedSample]:
    return (TimestampedSample(k, snapshot.sim_time_us, v) for k, v in snapshot.values.items())
