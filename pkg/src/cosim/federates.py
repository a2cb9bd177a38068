"""Synthetic subsystems that stand in for the hardware simulator.

* :class:`TransmissionFederate` publishes a phasor stream (magnitude, phase,
  frequency, feeder switch) with an optional fault and a synthetic frequency
  excursion.
* :class:`DistributionFederate` runs at the EMT step. It rebuilds the
  incoming stream with a reconstructor, drives a PCC voltage source and a
  PLL, and returns static-load P/Q.
* :class:`McsFederate` is the minute-scale management endpoint.
* :class:`RtsEmulator` serves a five-load-group feeder over Modbus for the
  local interface scenario and can report its own 1 ms ground truth.

Every federate is a single-owner state machine. Federates only talk to each
other through transports.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core_time import LatencyLedger, Leg, Scheduler, US_PER_S, seconds_to_us
from .modbus import ModbusServer, RegisterMap
from .pll import PccSource, SrfPll, TWO_PI, wrap_angle
from .signals import StaleSample, TimestampedSample, UninitializedError, make_reconstructor
from .transport import Frame, FrameKind, LatencyModel, TransportDisconnected, TransportTimeout, stream_rng

log = logging.getLogger(__name__)


def cycles_to_us(cycles: float, f_nominal: float = 60.0) -> int:
    return int(round(cycles / f_nominal * US_PER_S))


# ---------------------------------------------------------------------------
# Transmission


@dataclass(frozen=True)
class FaultConfig:
    start_us: int = 2_000_000
    duration_us: int = cycles_to_us(5)
    residual_v: float = 0.4
    # synthetic damped frequency swing starting at fault inception
    swing_hz: float = 0.2
    swing_freq_hz: float = 1.5
    swing_decay_s: float = 1.0

    def __post_init__(self) -> None:
        if self.start_us < 0 or self.duration_us <= 0:
            raise ValueError("fault start must be >= 0 and duration > 0")
        if not 0 <= self.residual_v <= 1.5:
            raise ValueError("residual voltage must lie in [0, 1.5] pu")
        if self.swing_decay_s <= 0:
            raise ValueError("swing decay must be positive")


@dataclass(frozen=True)
class TransmissionConfig:
    ts_phasor_us: int = 10_000
    v_nominal: float = 1.0
    f_nominal: float = 60.0
    # slow synthetic ambient frequency wander, off by default
    ambient_hz: float = 0.0
    ambient_freq_hz: float = 0.5
    fault: FaultConfig | None = None

    def __post_init__(self) -> None:
        if self.ts_phasor_us <= 0:
            raise ValueError("ts_phasor must be positive")
        if not 0 <= self.v_nominal <= 1.5:
            raise ValueError("nominal voltage must lie in [0, 1.5] pu")
        excursion = abs(self.ambient_hz) + (abs(self.fault.swing_hz) if self.fault else 0.0)
        if not (55.0 <= self.f_nominal - excursion and self.f_nominal + excursion <= 65.0):
            raise ValueError("frequency excursion leaves the [55, 65] Hz band")

    def fault_window(self) -> tuple[int, int]:
        """First phasor index of the fault and its length in samples."""
        if self.fault is None:
            return 0, 0
        ts = self.ts_phasor_us
        first = -(-self.fault.start_us // ts)
        return first, int(round(self.fault.duration_us / ts))


@dataclass(frozen=True)
class PhasorOutput:
    t_us: int
    v_mag: float
    phase: float
    freq: float
    switch: bool
    in_fault: bool

    def samples(self) -> tuple[TimestampedSample, ...]:
        t = self.t_us
        return (
            TimestampedSample("v_mag", t, self.v_mag),
            TimestampedSample("phase", t, self.phase),
            TimestampedSample("freq", t, self.freq),
            TimestampedSample("switch", t, 1.0 if self.switch else 0.0),
        )


@dataclass
class TransmissionState:
    config: TransmissionConfig
    phase: float = 0.0
    switch: bool = True
    last_t: int = -1


def source_frequency(config: TransmissionConfig, t_us: int) -> float:
    t = t_us / US_PER_S
    f = config.f_nominal
    if config.ambient_hz:
        f += config.ambient_hz * math.sin(TWO_PI * config.ambient_freq_hz * t)
    fault = config.fault
    if fault is not None and t_us >= fault.start_us:
        x = (t_us - fault.start_us) / US_PER_S
        f += fault.swing_hz * math.exp(-x / fault.swing_decay_s) * math.sin(TWO_PI * fault.swing_freq_hz * x)
    return f


def transmission_step(state: TransmissionState, t_us: int) -> PhasorOutput:
    cfg = state.config
    ts = cfg.ts_phasor_us
    if t_us % ts:
        raise ValueError(f"t={t_us} us is not on the {ts} us phasor grid")
    if t_us <= state.last_t:
        raise ValueError(f"t={t_us} us does not advance past {state.last_t} us")
    k = t_us // ts
    first, length = cfg.fault_window()
    in_fault = first <= k < first + length
    v = cfg.fault.residual_v if in_fault else cfg.v_nominal
    f = source_frequency(cfg, t_us)
    if state.last_t >= 0:
        dt = (t_us - state.last_t) / US_PER_S
        state.phase = wrap_angle(state.phase + TWO_PI * (f - cfg.f_nominal) * dt)
    state.last_t = t_us
    return PhasorOutput(t_us, v, state.phase, f, state.switch, in_fault)


class TransmissionFederate:
    """Publishes one phasor frame per ``ts_phasor`` and collects P/Q replies."""

    def __init__(self, config: TransmissionConfig, scheduler: Scheduler, endpoint, sender_id: str = "transmission",
                 until_us: int | None = None) -> None:
        self.config = config
        self.state = TransmissionState(config)
        self.scheduler = scheduler
        self.endpoint = endpoint
        self.sender_id = sender_id
        self.until_us = until_us
        self.trace: list[tuple[int, float, float]] = []
        self.pq_received: list[tuple[int, str, float, float]] = []
        self.send_failures = 0
        self._seq = 0
        endpoint.listener = self._on_frame

    def start(self, start_us: int = 0) -> None:
        self.scheduler.every(self.config.ts_phasor_us, self._tick, start_us=start_us)

    def _tick(self, now: int) -> None:
        if self.until_us is not None and now > self.until_us:
            return
        out = transmission_step(self.state, now)
        self.trace.append((now, out.v_mag, out.freq))
        self._seq += 1
        try:
            self.endpoint.send(Frame(FrameKind.MEASUREMENT, self._seq, self.sender_id, now, out.samples()))
        except (TransportDisconnected, TransportTimeout):
            self.send_failures += 1

    def _on_frame(self, frame: Frame, rx: int) -> None:
        vals = frame.values()
        self.pq_received.append((rx, frame.sender_id, vals.get("p_w", math.nan), vals.get("q_var", math.nan)))


# ---------------------------------------------------------------------------
# Receiving interface with a jittered hand-over cycle


# hand-overs land after deliveries but before the EMT step of the same instant
GATE_PRIORITY = 5


class ArrivalGate:
    """The receiving side's processing cycle.

    Frames land in a one-slot mailbox. At the end of every cycle (of
    duration drawn from ``cycle_model``) the newest unseen frame is handed to
    ``on_arrival(frame, now)``. Without a model every frame is handed over on
    receipt.
    """

    def __init__(self, scheduler: Scheduler, on_arrival, cycle_model: LatencyModel | None = None, seed: int = 0,
                 name: str = "gate", until_us: int | None = None) -> None:
        self.scheduler = scheduler
        self.on_arrival = on_arrival
        self.cycle_model = cycle_model
        self.until_us = until_us
        self._rng = stream_rng(seed, name)
        self._latest: Frame | None = None
        self._handed_seq = 0
        self.received = 0
        self.handed = 0
        self.superseded = 0

    def start(self, start_us: int = 0) -> None:
        if self.cycle_model is not None:
            first = start_us + self.cycle_model.draw_us(self._rng)
            self.scheduler.call_at(first, self._cycle_end, priority=GATE_PRIORITY)

    def __call__(self, frame: Frame, rx: int) -> None:
        self.received += 1
        if self.cycle_model is None:
            self.handed += 1
            self.on_arrival(frame, rx)
            return
        if self._latest is not None and self._latest.seq > self._handed_seq:
            self.superseded += 1
        self._latest = frame

    def _cycle_end(self) -> None:
        now = self.scheduler.now()
        if self._latest is not None and self._latest.seq > self._handed_seq:
            self._handed_seq = self._latest.seq
            self.handed += 1
            self.on_arrival(self._latest, now)
        if self.until_us is None or now < self.until_us:
            self.scheduler.call_later(max(1, self.cycle_model.draw_us(self._rng)), self._cycle_end,
                                     priority=GATE_PRIORITY)


# ---------------------------------------------------------------------------
# Distribution


def static_load(p_nom: float, q_nom: float, v_pu: float) -> tuple[float, float]:
    """Constant-impedance load: both powers scale with ``v**2``."""
    v2 = v_pu * v_pu
    return p_nom * v2, q_nom * v2


@dataclass(frozen=True)
class DistributionConfig:
    ts_emt_us: int = 100
    pq_period_us: int = 10_000
    smoother: str = "extrap"
    lpf_tau_s: float = 0.01
    extrap_n: int = 1
    extrap_k1: float = 0.001
    slope_clamp: float | None = None
    p_nom_w: float = 1.0e6
    q_nom_var: float = 0.3e6
    v_nominal: float = 1.0
    f_nominal: float = 60.0
    pll_zeta: float = 0.707
    pll_omega_n: float = TWO_PI * 20.0

    def __post_init__(self) -> None:
        if self.ts_emt_us <= 0 or self.pq_period_us <= 0:
            raise ValueError("steps must be positive")
        if self.pq_period_us % self.ts_emt_us:
            raise ValueError("pq_period must be a multiple of ts_emt")


@dataclass(frozen=True)
class DistributionPoint:
    t_us: int
    f_received: float
    f_pll: float
    v_reconstructed: float
    p_w: float
    q_var: float


CHANNELS = ("v_mag", "freq")


class DistributionFederate:
    """EMT-rate subsystem fed by a reconstructed phasor stream."""

    def __init__(self, config: DistributionConfig, scheduler: Scheduler | None = None, endpoint=None,
                 sender_id: str = "distribution", until_us: int | None = None) -> None:
        self.config = config
        self.scheduler = scheduler
        self.endpoint = endpoint
        self.sender_id = sender_id
        self.until_us = until_us
        self.dt_s = config.ts_emt_us / US_PER_S
        self.reconstructors = {
            ch: make_reconstructor(
                config.smoother, ts_emt_us=config.ts_emt_us, lpf_tau_s=config.lpf_tau_s,
                extrap_n=config.extrap_n, extrap_k1=config.extrap_k1, slope_clamp=config.slope_clamp,
            )
            for ch in CHANNELS
        }
        self._nominal = {"v_mag": config.v_nominal, "freq": config.f_nominal}
        self.pcc = PccSource()
        self.pll = SrfPll(config.f_nominal, config.pll_zeta, config.pll_omega_n)
        self.switch = 1.0
        self.trace: list[tuple] = []
        self.arrivals: list[tuple[int, int, float, float]] = []
        self.stale = 0
        self.send_failures = 0
        self._steps = 0
        self._seq = 0
        self._steps_per_pq = config.pq_period_us // config.ts_emt_us

    def start(self, start_us: int = 0) -> None:
        self.scheduler.every(self.config.ts_emt_us, self._tick, start_us=start_us)

    def arrive(self, frame: Frame, now: int) -> None:
        vals = frame.values()
        for ch, rec in self.reconstructors.items():
            if ch in vals:
                try:
                    rec.arrive(TimestampedSample(ch, now, vals[ch]))
                except StaleSample:
                    self.stale += 1
        if "switch" in vals:
            self.switch = 1.0 if vals["switch"] >= 0.5 else 0.0
        self.arrivals.append((now, frame.send_sim_time, vals.get("v_mag", math.nan), vals.get("freq", math.nan)))

    def _channel(self, ch: str) -> float:
        try:
            return self.reconstructors[ch].step()
        except UninitializedError:
            return self._nominal[ch]

    def step(self, now: int) -> tuple[DistributionPoint, Frame | None]:
        v = self._channel("v_mag") * self.switch
        f = self._channel("freq")
        if not (math.isfinite(v) and math.isfinite(f)):
            raise FloatingPointError(f"reconstruction diverged at t={now} us")
        sample = self.pcc.step(v, f, self.dt_s, now)
        _, f_pll = self.pll.step(sample, self.dt_s)
        p, q = static_load(self.config.p_nom_w, self.config.q_nom_var, v)
        point = DistributionPoint(now, f, f_pll, v, p, q)
        self.trace.append((now, f, f_pll, v, p, q))
        frame = None
        if self._steps % self._steps_per_pq == 0:
            self._seq += 1
            frame = Frame(FrameKind.MEASUREMENT, self._seq, self.sender_id, now, (
                TimestampedSample("p_w", now, p),
                TimestampedSample("q_var", now, q),
            ))
        self._steps += 1
        return point, frame

    def _tick(self, now: int) -> None:
        if self.until_us is not None and now > self.until_us:
            return
        _, frame = self.step(now)
        if frame is not None and self.endpoint is not None:
            try:
                self.endpoint.send(frame)
            except (TransportDisconnected, TransportTimeout):
                self.send_failures += 1


def distribution_step(state: DistributionFederate, now: int, frames=()) -> tuple[DistributionPoint, Frame | None]:
    """Feed ``frames`` (received at ``now``) and advance one EMT step."""
    for frame in frames:
        state.arrive(frame, now)
    return state.step(now)


# ---------------------------------------------------------------------------
# Management system


LOAD_FOLLOWING = "load_following"
STEP_SCHEDULE = "step_schedule"
MAX_INTERVAL_US = 300 * US_PER_S


@dataclass(frozen=True)
class McsConfig:
    rule: str = LOAD_FOLLOWING
    interval_us: int = US_PER_S
    compute_us: int = 0
    n_groups: int = 5
    group_spacing_us: int = 100 * US_PER_S
    schedule_start_us: int = 0
    follow_prefix: str = "set_"
    follow_map: Mapping[str, str] | None = None
    sender_id: str = "mcs"

    def __post_init__(self) -> None:
        if self.rule not in (LOAD_FOLLOWING, STEP_SCHEDULE):
            raise ValueError(f"unknown MCS rule {self.rule!r}")
        if not 0 < self.interval_us <= MAX_INTERVAL_US:
            raise ValueError("dispatch interval must lie in (0, 300 s]")
        if self.compute_us < 0 or self.n_groups < 1 or self.group_spacing_us <= 0:
            raise ValueError("invalid MCS timing or group settings")

    def command_for(self, measurement: str) -> str:
        if self.follow_map is not None and measurement in self.follow_map:
            return self.follow_map[measurement]
        return self.follow_prefix + measurement


def group_names(n_groups: int = 5) -> list[str]:
    return [f"lg_{i}" for i in range(1, n_groups + 1)]


def energized_groups(config: McsConfig, t_us: int) -> int:
    if t_us < config.schedule_start_us:
        return 0
    return min(config.n_groups, (t_us - config.schedule_start_us) // config.group_spacing_us + 1)


def schedule_commands(config: McsConfig, t_us: int) -> dict[str, float]:
    k = energized_groups(config, t_us)
    return {name: 1.0 if i < k else 0.0 for i, name in enumerate(group_names(config.n_groups))}


@dataclass
class McsState:
    config: McsConfig
    last_sim_time: int = -1
    stale: int = 0
    dispatched: int = 0
    seq: int = 0

    def observe(self, frame: Frame) -> bool:
        """Stale check only; return False (and count) for out-of-date frames."""
        t = max((s.sim_time for s in frame.samples), default=frame.send_sim_time)
        if t < self.last_sim_time:
            self.stale += 1
            return False
        self.last_sim_time = t
        return True


def mcs_step(state: McsState, frame: Frame, now: int | None = None) -> Frame | None:
    """Turn a measurement frame into a command frame (``None`` if stale)."""
    if not state.observe(frame):
        return None
    cfg = state.config
    t = state.last_sim_time
    if cfg.rule == LOAD_FOLLOWING:
        commands = {cfg.command_for(s.signal_id): s.value for s in frame.samples}
    else:
        commands = schedule_commands(cfg, t)
    state.seq += 1
    state.dispatched += 1
    stamp = t if now is None else now
    samples = tuple(TimestampedSample(k, t, float(v)) for k, v in commands.items())
    return Frame(FrameKind.COMMAND, state.seq, cfg.sender_id, stamp, samples)


class McsFederate:
    """Virtual-time management endpoint attached to a loopback endpoint."""

    def __init__(self, config: McsConfig, scheduler: Scheduler, endpoint, ledger: LatencyLedger | None = None) -> None:
        self.config = config
        self.state = McsState(config)
        self.scheduler = scheduler
        self.endpoint = endpoint
        self.ledger = ledger
        self.received = 0
        self.send_failures = 0
        self.sent: list[Frame] = []
        self._last_dispatch: int | None = None
        endpoint.listener = self._on_frame

    def _due(self, rx: int) -> bool:
        if self._last_dispatch is None:
            return True
        # 10% slack so a slightly early frame does not skip a whole interval
        return rx - self._last_dispatch >= self.config.interval_us - self.config.interval_us // 10

    def _on_frame(self, frame: Frame, rx: int) -> None:
        self.received += 1
        if self.ledger is not None and frame.send_sim_time <= rx:
            self.ledger.record_leg(Leg.IFACE_TO_MCS, frame.send_sim_time, rx)
        if not self._due(rx):
            self.state.observe(frame)
            return
        cmd = mcs_step(self.state, frame, now=rx + self.config.compute_us)
        if cmd is None:
            return
        self._last_dispatch = rx
        self.scheduler.call_later(self.config.compute_us, self._send, cmd, rx)

    def _send(self, cmd: Frame, rx: int) -> None:
        now = self.scheduler.now()
        try:
            self.endpoint.send(cmd)
        except (TransportDisconnected, TransportTimeout):
            # the link is down: the command is lost at the source, never replayed
            self.send_failures += 1
            return
        self.sent.append(cmd)
        if self.ledger is not None:
            self.ledger.record_leg(Leg.MCS_COMPUTE, rx, now)


class McsServer:
    """Realtime management endpoint listening for one interface connection."""

    def __init__(self, config: McsConfig, clock, host: str = "127.0.0.1", port: int = 0,
                 ledger: LatencyLedger | None = None) -> None:
        from .transport import FramedListener

        self.config = config
        self.state = McsState(config)
        self.clock = clock
        self.ledger = ledger
        self._host = host
        self._listener_cls = FramedListener
        self.listener = FramedListener(host, port, clock)
        self.port = self.listener.address[1]
        self.conn = None
        self.received = 0
        self.sent = 0
        self.send_failures = 0
        self.stall_reads_until = 0
        self._down_until = 0
        self._last_dispatch: int | None = None
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._host, self.port

    def start(self) -> "McsServer":
        self._thread = threading.Thread(target=self._run, name="mcs-server", daemon=True)
        self._thread.start()
        return self

    def drop(self, down_s: float) -> None:
        """Close the connection and refuse new ones for ``down_s`` seconds."""
        with self._lock:
            self._down_until = self.clock.now() + seconds_to_us(down_s)
            if self.conn is not None:
                self.conn.close()
                self.conn = None
            if self.listener is not None:
                self.listener.close()
                self.listener = None

    def stall_reads(self, seconds: float) -> None:
        self.stall_reads_until = self.clock.now() + seconds_to_us(seconds)

    def _run(self) -> None:
        while not self._stop.is_set():
            with self._lock:
                now = self.clock.now()
                if self.listener is None and now >= self._down_until:
                    self.listener = self._listener_cls(self._host, self.port, self.clock)
                listener, conn = self.listener, self.conn
            if conn is None:
                if listener is None:
                    self._stop.wait(0.01)
                    continue
                conn = listener.accept(timeout_s=0.05)
                with self._lock:
                    self.conn = conn
                continue
            if self.clock.now() < self.stall_reads_until:
                self._stop.wait(0.01)
                continue
            conn.wait_readable(0.05)
            try:
                timed = conn.poll_timed()
            except TransportDisconnected:
                with self._lock:
                    if self.conn is conn:
                        self.conn.close()
                        self.conn = None
                continue
            for rx, frame in timed:
                self._handle(conn, frame, rx)

    def _handle(self, conn, frame: Frame, rx: int) -> None:
        self.received += 1
        if self.ledger is not None and frame.send_sim_time <= rx:
            self.ledger.record_leg(Leg.IFACE_TO_MCS, frame.send_sim_time, rx)
        interval = self.config.interval_us
        if self._last_dispatch is not None and rx - self._last_dispatch < interval - interval // 10:
            self.state.observe(frame)
            return
        cmd = mcs_step(self.state, frame, now=self.clock.now())
        if cmd is None:
            return
        self._last_dispatch = rx
        try:
            conn.send(cmd)
            self.sent += 1
        except (TransportDisconnected, TransportTimeout):
            self.send_failures += 1
            return
        if self.ledger is not None:
            self.ledger.record_leg(Leg.MCS_COMPUTE, rx, max(rx, cmd.send_sim_time))

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(2.0)
        with self._lock:
            if self.conn is not None:
                self.conn.close()
            if self.listener is not None:
                self.listener.close()


# ---------------------------------------------------------------------------
# Simulator emulator for the load-group test


RTS_MEASUREMENTS = ("v_pcc_pu", "freq_hz", "p_w", "q_var")


@dataclass(frozen=True)
class RtsConfig:
    ts_us: int = 1_000
    group_p_w: tuple[float, ...] = (400e3, 300e3, 500e3, 350e3, 450e3)
    base_p_w: float = 200e3
    q_per_p: float = 0.3
    pickup_tau_s: float = 0.2
    v_droop_pu_per_mw: float = 0.02
    f_dip_hz: float = 0.05
    f_dip_tau_s: float = 0.5
    f_nominal: float = 60.0

    def __post_init__(self) -> None:
        if self.ts_us <= 0 or self.pickup_tau_s <= 0 or self.f_dip_tau_s <= 0:
            raise ValueError("steps and time constants must be positive")
        if not self.group_p_w:
            raise ValueError("at least one load group is required")

    @property
    def commands(self) -> list[str]:
        return group_names(len(self.group_p_w))


class RtsEmulator:
    """Feeder with switchable load groups, served over Modbus.

    State advances on a 1 ms grid. A command write that commits at ``t``
    takes effect at the next grid step after ``t``. Measurements are
    evaluated lazily, from the switching history, right before each request
    is served, and always reflect the last completed grid step.
    """

    def __init__(self, config: RtsConfig, clock, register_map: RegisterMap, sim_time_signal: str | None = "sim_time"):
        self.config = config
        self.clock = clock
        self.map = register_map
        self.sim_time_signal = sim_time_signal
        # per group: list of (effective_us, target level)
        self.events: list[list[tuple[int, float]]] = [[] for _ in config.group_p_w]
        self.commits: list[tuple[int, str, float]] = []
        self.reads: list[int] = []
        self.server = ModbusServer(register_map, before_request=self.refresh, on_write=self.on_write)
        self.refresh()

    def grid_time(self, t_us: int) -> int:
        return (t_us // self.config.ts_us) * self.config.ts_us

    def refresh(self) -> None:
        now = self.clock.now()
        self.reads.append(now)
        t = self.grid_time(now)
        values = self.evaluate_at(t)
        if self.sim_time_signal:
            values[self.sim_time_signal] = t // 1000
        self.map.set_values(values)

    def on_write(self, touched: list[str]) -> None:
        now = self.clock.now()
        effective = self.grid_time(now) + self.config.ts_us
        names = self.config.commands
        for sid in touched:
            value = float(self.map.get_value(sid))
            self.commits.append((now, sid, value))
            if sid not in names:
                continue
            i = names.index(sid)
            target = 1.0 if value >= 0.5 else 0.0
            current = self.events[i][-1][1] if self.events[i] else 0.0
            if target != current:
                self.events[i].append((effective, target))

    def _levels(self, i: int, t: np.ndarray) -> np.ndarray:
        tau_us = self.config.pickup_tau_s * US_PER_S
        level = np.zeros(t.shape, dtype=float)
        prev_t, prev_level, prev_target = 0, 0.0, 0.0
        for te, target in self.events[i]:
            # level reached at te under the previous target
            at_te = prev_target + (prev_level - prev_target) * math.exp(-(te - prev_t) / tau_us)
            mask = t >= te
            level[mask] = target + (at_te - target) * np.exp(-(t[mask] - te) / tau_us)
            prev_t, prev_level, prev_target = te, at_te, target
        return level

    def evaluate_at(self, t: int) -> dict[str, float]:
        """Scalar form of :meth:`evaluate` for one grid time."""
        cfg = self.config
        tau_us = cfg.pickup_tau_s * US_PER_S
        dip_tau_us = cfg.f_dip_tau_s * US_PER_S
        p, f = float(cfg.base_p_w), float(cfg.f_nominal)
        for i, p_group in enumerate(cfg.group_p_w):
            level = 0.0
            prev_t, prev_level, prev_target = 0, 0.0, 0.0
            for te, target in self.events[i]:
                if te > t:
                    break
                at_te = prev_target + (prev_level - prev_target) * math.exp(-(te - prev_t) / tau_us)
                level = target + (at_te - target) * math.exp(-(t - te) / tau_us)
                if target > 0:
                    f -= cfg.f_dip_hz * math.exp(-(t - te) / dip_tau_us)
                prev_t, prev_level, prev_target = te, at_te, target
            p += p_group * level
        return {
            "v_pcc_pu": 1.0 - cfg.v_droop_pu_per_mw * p / 1e6,
            "freq_hz": f,
            "p_w": p,
            "q_var": cfg.q_per_p * p,
        }

    def evaluate(self, t: np.ndarray) -> dict[str, np.ndarray]:
        """Measurements at grid times ``t`` (us) under the recorded switching."""
        cfg = self.config
        t = np.asarray(t, dtype=np.int64)
        p = np.full(t.shape, cfg.base_p_w, dtype=float)
        f = np.full(t.shape, cfg.f_nominal, dtype=float)
        for i, p_group in enumerate(cfg.group_p_w):
            p += p_group * self._levels(i, t)
            for te, target in self.events[i]:
                if target > 0:
                    mask = t >= te
                    f[mask] -= cfg.f_dip_hz * np.exp(-(t[mask] - te) / (cfg.f_dip_tau_s * US_PER_S))
        return {
            "v_pcc_pu": 1.0 - cfg.v_droop_pu_per_mw * p / 1e6,
            "freq_hz": f,
            "p_w": p,
            "q_var": cfg.q_per_p * p,
        }

    def ground_truth(self, duration_us: int) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        t = np.arange(0, duration_us + 1, self.config.ts_us, dtype=np.int64)
        return t, self.evaluate(t)


# ---------------------------------------------------------------------------
# Phasor -> EMT coupling probe


def coupling_delay_us(event_us: int, ts_phasor_us: int = 1_000, ts_emt_us: int = 100) -> int:
    """Measured delay from a phasor-side input change to its EMT-side effect.

    The phasor solver samples its input at the start of each step and
    publishes the result at the end of that step over a zero-latency link.
    The EMT side consumes the newest value at each of its steps and the
    effect is in place one EMT step later.
    """
    from .transport import loopback_pair

    sched = Scheduler()
    tx, rx = loopback_pair(LatencyModel.fixed(0.0), 0, sched, name="coupling")
    latest = {"value": 0.0}
    effect: list[int] = []
    seq = [0]

    def on_delivery(frame: Frame, now: int) -> None:
        latest["value"] = frame.samples[0].value

    rx.listener = on_delivery

    def publish(value: float, sampled_at: int) -> None:
        seq[0] += 1
        tx.send(Frame(FrameKind.MEASUREMENT, seq[0], "phasor", sched.now(),
                      (TimestampedSample("x", sampled_at, value),)))

    def phasor_step(now: int) -> None:
        value = 1.0 if now >= event_us else 0.0
        sched.call_later(ts_phasor_us, publish, value, now, priority=5)

    def emt_step(now: int) -> None:
        if not effect and latest["value"] == 1.0:
            effect.append(now + ts_emt_us)
            sched.stop()

    sched.every(ts_phasor_us, phasor_step, priority=5)
    sched.every(ts_emt_us, emt_step, priority=10)
    sched.run(until_us=event_us + 10 * (ts_phasor_us + ts_emt_us))
    if not effect:
        raise RuntimeError("input change never reached the EMT side")
    return effect[0] - event_us


__all__ = [
    "ArrivalGate",
    "DistributionConfig",
    "DistributionFederate",
    "DistributionPoint",
    "FaultConfig",
    "McsConfig",
    "McsFederate",
    "McsServer",
    "McsState",
    "PhasorOutput",
    "RtsConfig",
    "RtsEmulator",
    "TransmissionConfig",
    "TransmissionFederate",
    "TransmissionState",
    "coupling_delay_us",
    "cycles_to_us",
    "distribution_step",
    "energized_groups",
    "group_names",
    "mcs_step",
    "schedule_commands",
    "source_frequency",
    "static_load",
    "transmission_step",
]
