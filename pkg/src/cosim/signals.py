"""Reconstruction of coarse, jittery sample streams onto a fine step grid.

Three reconstructors share one interface (``arrive(sample)`` when data comes
in, ``step()`` once per fine step):

* :class:`ZeroOrderHold` repeats the newest value.
* :class:`LowPassFilter` first-order smoothing of the held value.
* :class:`Extrapolator` continues the recent trend between arrivals and
  bleeds off the error against the newest actual value:

      y[t] = y[t-1] + dy_s + dy_e
      dy_s = (y_a[T] - y_a[T-n]) / N
      dy_e = k1 * (y_a[T] - y[t-1])

  where ``N`` is the number of fine steps spanned by the last ``n`` arrival
  intervals.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core_time import US_PER_S


class UninitializedError(RuntimeError):
    """A reconstructor was stepped before any data arrived."""


class StaleSample(ValueError):
    """An arrival is not newer than the previous one."""


@dataclass(frozen=True)
class TimestampedSample:
    signal_id: str
    sim_time: int
    value: float
    wall_time: str | None = None

    def __post_init__(self) -> None:
        if not self.signal_id:
            raise ValueError("signal_id must be non-empty")
        if not math.isfinite(self.value):
            raise ValueError(f"{self.signal_id}: non-finite value {self.value!r}")
        if self.sim_time < 0:
            raise ValueError(f"{self.signal_id}: negative sim_time {self.sim_time}")


def _value(sample) -> float:
    return sample.value if isinstance(sample, TimestampedSample) else float(sample)


class ZeroOrderHold:
    def __init__(self) -> None:
        self.last_value = 0.0
        self.initialized = False

    def arrive(self, sample: TimestampedSample | float) -> None:
        self.last_value = _value(sample)
        self.initialized = True

    def step(self) -> float:
        if not self.initialized:
            raise UninitializedError("zero-order hold stepped before any arrival")
        return self.last_value


class LowPassFilter:
    """First-order low-pass with exact exponential discretization.

    When ``y0`` is None the filter seeds itself with the first input so that
    a stream starting far from zero does not produce a start-up transient.
    """

    def __init__(self, tau_s: float, dt_s: float | None = None, y0: float | None = None) -> None:
        if not tau_s > 0:
            raise ValueError("tau must be positive")
        self.tau = float(tau_s)
        self.y_prev = y0
        self._dt = None
        self._alpha = None
        if dt_s is not None:
            self._set_dt(dt_s)
        self._held: float | None = None

    def _set_dt(self, dt_s: float) -> None:
        if not dt_s > 0:
            raise ValueError("dt must be positive")
        self._dt = dt_s
        self._alpha = -math.expm1(-dt_s / self.tau)

    def update(self, u: float, dt_s: float) -> float:
        if not math.isfinite(u):
            raise ValueError(f"non-finite filter input {u!r}")
        if dt_s != self._dt:
            self._set_dt(dt_s)
        if self.y_prev is None:
            self.y_prev = float(u)
            return self.y_prev
        y = self.y_prev + self._alpha * (u - self.y_prev)
        self.y_prev = y
        return y

    # Reconstructor interface: filter the held value at a fixed step.
    def arrive(self, sample: TimestampedSample | float) -> None:
        self._held = _value(sample)

    def step(self) -> float:
        if self._held is None:
            raise UninitializedError("low-pass filter stepped before any arrival")
        if self._dt is None:
            raise ValueError("fixed-step use requires dt_s at construction")
        return self.update(self._held, self._dt)


def lpf_step(state: LowPassFilter, u: float, dt_s: float) -> float:
    return state.update(u, dt_s)


class Extrapolator:
    """Trend-following predictor for data arriving slower than it is consumed.

    Until ``n + 1`` arrivals have been seen it behaves as a zero-order hold.
    ``slope_clamp``, when set, bounds ``|dy_s|`` per step.
    """

    def __init__(
        self,
        n: int = 1,
        k1: float = 0.001,
        ts_emt_us: int = 100,
        slope_clamp: float | None = None,
    ) -> None:
        if n < 1:
            raise ValueError("n must be >= 1")
        if k1 < 0:
            raise ValueError("k1 must be >= 0")
        if ts_emt_us <= 0:
            raise ValueError("ts_emt must be positive")
        self.n = int(n)
        self.k1 = float(k1)
        self.ts_emt_us = int(ts_emt_us)
        self.slope_clamp = slope_clamp
        self.history: deque[tuple[int, float]] = deque(maxlen=self.n + 1)
        self.y_e_prev: float | None = None
        self.N_current = 1
        self.arrivals_seen = 0
        self.stale_dropped = 0
        self._dy_s = 0.0

    def arrive(self, sample: TimestampedSample) -> None:
        """Register an arrival; stale (non-increasing time) samples are dropped."""
        t = sample.sim_time
        if self.history and t <= self.history[-1][0]:
            self.stale_dropped += 1
            raise StaleSample(f"arrival at {t} us is not after {self.history[-1][0]} us")
        self.history.append((t, sample.value))
        self.arrivals_seen += 1
        if self.y_e_prev is None:
            self.y_e_prev = sample.value
        if len(self.history) == self.n + 1:
            t_old, y_old = self.history[0]
            self.N_current = max(1, round((t - t_old) / self.ts_emt_us))
            dy_s = (sample.value - y_old) / self.N_current
            if self.slope_clamp is not None:
                dy_s = max(-self.slope_clamp, min(self.slope_clamp, dy_s))
            self._dy_s = dy_s

    @property
    def slope_increment(self) -> float:
        return self._dy_s if self.arrivals_seen > self.n else 0.0

    def step(self) -> float:
        if self.y_e_prev is None:
            raise UninitializedError("extrapolator stepped before any arrival")
        y_actual = self.history[-1][1]
        if self.arrivals_seen <= self.n:
            self.y_e_prev = y_actual
            return y_actual
        y = self.y_e_prev + self._dy_s + self.k1 * (y_actual - self.y_e_prev)
        self.y_e_prev = y
        return y


def extrap_on_arrival(state: Extrapolator, sample: TimestampedSample) -> None:
    state.arrive(sample)


def extrap_step(state: Extrapolator) -> float:
    return state.step()


def make_reconstructor(kind: str, *, ts_emt_us: int, lpf_tau_s: float = 0.01, extrap_n: int = 1,
                      extrap_k1: float = 0.001, slope_clamp: float | None = None):
    """Build a reconstructor from the scenario-config vocabulary."""
    if kind == "zoh":
        return ZeroOrderHold()
    if kind == "lpf":
        return LowPassFilter(lpf_tau_s, dt_s=ts_emt_us / US_PER_S)
    if kind == "extrap":
        return Extrapolator(n=extrap_n, k1=extrap_k1, ts_emt_us=ts_emt_us, slope_clamp=slope_clamp)
    raise ValueError(f"unknown smoother {kind!r}; expected zoh, lpf or extrap")


SMOOTHERS = ("zoh", "lpf", "extrap")


# ---------------------------------------------------------------------------
# Fidelity metrics


@dataclass(frozen=True)
class Fidelity:
    rmse: float
    lag: int
    total_variation: float
    extras: dict = field(default_factory=dict)


def cross_correlation_lag(reference, candidate, max_lag: int | None = None) -> int:
    """Lag (in samples) maximizing the Pearson correlation over the overlap.

    Positive when the candidate trails the reference, i.e.
    ``candidate[k] ~ reference[k - lag]``. Each lag is scored on its own
    overlapping segment, so drifting signals are not biased toward zero lag.
    The default search covers half the series length. Ties go to the
    smallest-magnitude lag.
    """
    ref = np.asarray(reference, dtype=float)
    cand = np.asarray(candidate, dtype=float)
    if ref.shape != cand.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {cand.shape}")
    n = ref.size
    if n == 0:
        raise ValueError("empty series")
    limit = n // 2 if max_lag is None else min(int(max_lag), n - 2)
    if limit < 0 or n < 2:
        return 0
    # centre once for numerical headroom; Pearson is shift-invariant
    r = ref - ref.mean()
    c = cand - cand.mean()
    size = 1 << (2 * n - 1).bit_length()
    full = np.fft.irfft(np.fft.rfft(c, size) * np.conj(np.fft.rfft(r, size)), size)
    cr, cc = np.concatenate([[0.0], np.cumsum(r)]), np.concatenate([[0.0], np.cumsum(c)])
    cr2, cc2 = np.concatenate([[0.0], np.cumsum(r * r)]), np.concatenate([[0.0], np.cumsum(c * c)])
    lags = np.arange(-limit, limit + 1)
    # full[k] = sum_i c[i + k] r[i]; negative k wraps to the tail.
    cross = full[lags % size]
    m = (n - np.abs(lags)).astype(float)
    r_lo = np.where(lags >= 0, 0, -lags)
    c_lo = np.where(lags >= 0, lags, 0)
    sr = cr[r_lo + m.astype(int)] - cr[r_lo]
    sc = cc[c_lo + m.astype(int)] - cc[c_lo]
    vr = cr2[r_lo + m.astype(int)] - cr2[r_lo] - sr * sr / m
    vc = cc2[c_lo + m.astype(int)] - cc2[c_lo] - sc * sc / m
    cov = cross - sr * sc / m
    denom = np.sqrt(np.clip(vr, 0.0, None) * np.clip(vc, 0.0, None))
    scale = max(float(np.dot(r, r)), float(np.dot(c, c)), 1e-300)
    ok = denom > 1e-12 * scale
    if not ok.any():
        return 0
    vals = np.full(lags.shape, -np.inf)
    vals[ok] = cov[ok] / denom[ok]
    best = vals.max()
    # FFT round-off can split an exact tie; treat near-equal peaks as ties.
    tied = lags[vals >= best - 1e-12]
    return int(tied[np.argmin(np.abs(tied))])


def total_variation(x) -> float:
    arr = np.asarray(x, dtype=float)
    return float(np.abs(np.diff(arr)).sum()) if arr.size > 1 else 0.0


def fidelity_metrics(reference, candidate, max_lag: int | None = None) -> Fidelity:
    ref = np.asarray(reference, dtype=float)
    cand = np.asarray(candidate, dtype=float)
    if ref.shape != cand.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {cand.shape}")
    rmse = float(np.sqrt(np.mean((cand - ref) ** 2))) if ref.size else 0.0
    return Fidelity(
        rmse=rmse,
        lag=cross_correlation_lag(ref, cand, max_lag=max_lag),
        total_variation=total_variation(cand),
    )
