import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cosim.signals import (
    Extrapolator,
    LowPassFilter,
    StaleSample,
    TimestampedSample,
    UninitializedError,
    ZeroOrderHold,
    cross_correlation_lag,
    extrap_on_arrival,
    extrap_step,
    fidelity_metrics,
    lpf_step,
    make_reconstructor,
    total_variation,
)

TS = 100  # EMT step, us


def s(t, v, sid="x"):
    return TimestampedSample(sid, t, v)


# -- samples ------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"signal_id": "", "sim_time": 0, "value": 1.0},
    {"signal_id": "v", "sim_time": 0, "value": math.nan},
    {"signal_id": "v", "sim_time": 0, "value": math.inf},
    {"signal_id": "v", "sim_time": -1, "value": 1.0},
])
def test_sample_invariants(kwargs):
    with pytest.raises(ValueError):
        TimestampedSample(**kwargs)


# -- ZOH ----------------------------------------------------------------------

def test_zoh_holds():
    z = ZeroOrderHold()
    z.arrive(s(0, 5.0))
    assert [z.step() for _ in range(3)] == [5.0, 5.0, 5.0]
    z.arrive(s(10, 2.0))
    assert z.step() == 2.0


def test_zoh_uninitialized():
    with pytest.raises(UninitializedError):
        ZeroOrderHold().step()


# -- LPF ----------------------------------------------------------------------

def test_lpf_unit_step_one_tau():
    f = LowPassFilter(0.01, y0=0.0)
    dt = 1e-4
    for _ in range(100):
        y = lpf_step(f, 1.0, dt)
    assert y == pytest.approx(1.0 - math.exp(-1.0), abs=1e-12)


def test_lpf_exact_discretization_independent_of_step():
    a, b = LowPassFilter(0.01, y0=0.0), LowPassFilter(0.01, y0=0.0)
    ya = a.update(1.0, 0.004)
    for _ in range(4):
        yb = b.update(1.0, 0.001)
    assert ya == pytest.approx(yb, abs=1e-14)


def test_lpf_fixed_point():
    f = LowPassFilter(0.01, y0=3.25)
    assert f.update(3.25, 1e-4) == 3.25


def test_lpf_seeds_from_first_input():
    f = LowPassFilter(0.01)
    assert f.update(7.0, 1e-4) == 7.0


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(1e-5, 1.0), st.floats(1e-3, 1.0))
def test_lpf_contraction(y0, u, dt, tau):
    f = LowPassFilter(tau, y0=y0)
    prev = abs(y0 - u)
    for _ in range(5):
        err = abs(f.update(u, dt) - u)
        assert err <= prev + 1e-12
        prev = err


@pytest.mark.parametrize("slope", [0.5, 2.0, -3.0])
def test_lpf_ramp_lag(slope):
    tau, dt = 0.01, 1e-4
    f = LowPassFilter(tau, y0=0.0)
    n = 5000
    for k in range(1, n + 1):
        y = f.update(slope * k * dt, dt)
    u = slope * n * dt
    lag = (u - y) / slope
    # discrete steady state: dt / (exp(dt/tau) - 1), which tends to tau - dt/2
    assert lag == pytest.approx(dt / math.expm1(dt / tau), rel=1e-9)
    assert abs(lag - tau) < dt


def test_lpf_rejects_bad_params():
    with pytest.raises(ValueError):
        LowPassFilter(0.0)
    with pytest.raises(ValueError):
        LowPassFilter(0.01).update(math.nan, 1e-4)


# -- Extrapolator -------------------------------------------------------------

def test_extrap_bootstrap_is_hold():
    e = Extrapolator(n=1, k1=0.001, ts_emt_us=TS)
    extrap_on_arrival(e, s(0, 1.0))
    assert e.y_e_prev == 1.0
    assert e.slope_increment == 0.0
    assert extrap_step(e) == 1.0


def test_extrap_n_current_from_spacing():
    e = Extrapolator(n=1, ts_emt_us=TS)
    e.arrive(s(0, 1.0))
    e.arrive(s(10_000, 2.0))
    assert e.N_current == 100


def test_extrap_n_current_clamped():
    e = Extrapolator(n=1, ts_emt_us=TS)
    e.arrive(s(0, 1.0))
    e.arrive(s(30, 2.0))
    assert e.N_current == 1


def test_extrap_hand_case():
    e = Extrapolator(n=1, k1=0.001, ts_emt_us=TS)
    e.arrive(s(0, 1.0))
    e.arrive(s(10_000, 2.0))
    e.y_e_prev = 1.5
    # dy_s = (2 - 1) / 100, dy_e = 0.001 * (2 - 1.5)
    assert e.slope_increment == pytest.approx(0.01, abs=1e-15)
    assert abs(e.step() - 1.5105) <= 1e-12


def test_extrap_constant_fixed_point():
    e = Extrapolator(n=1, k1=0.001, ts_emt_us=TS)
    for k in range(20):
        e.arrive(s(k * 10_000, 4.2))
        for _ in range(100):
            assert e.step() == 4.2


def test_extrap_stale_rejected():
    e = Extrapolator()
    e.arrive(s(100, 1.0))
    with pytest.raises(StaleSample):
        e.arrive(s(100, 2.0))
    assert e.stale_dropped == 1


def test_extrap_uninitialized():
    with pytest.raises(UninitializedError):
        Extrapolator().step()


@pytest.mark.parametrize("kwargs", [{"n": 0}, {"k1": -0.1}, {"ts_emt_us": 0}])
def test_extrap_bad_params(kwargs):
    with pytest.raises(ValueError):
        Extrapolator(**kwargs)


@settings(max_examples=200, deadline=None)
@given(
    y_prev=st.floats(-10, 10), y_old=st.floats(-10, 10), y_new=st.floats(-10, 10),
    k1=st.floats(1e-4, 0.5), gap=st.integers(1, 400), m=st.integers(1, 300),
)
def test_extrap_closed_form_between_arrivals(y_prev, y_old, y_new, k1, gap, m):
    e = Extrapolator(n=1, k1=k1, ts_emt_us=TS)
    e.arrive(s(0, y_old))
    e.arrive(s(gap * TS, y_new))
    e.y_e_prev = y_prev
    slope = (y_new - y_old) / gap
    for _ in range(m):
        y = e.step()
    # z = y_e - y_a obeys z' = (1 - k1) z + slope
    r = (1.0 - k1) ** m
    z = r * (y_prev - y_new) + slope * (1.0 - r) / k1
    assert y == pytest.approx(y_new + z, abs=1e-9 * max(1.0, abs(slope) / k1))


streams = st.lists(
    st.tuples(st.integers(1, 400), st.floats(-100, 100, allow_nan=False)),
    min_size=3, max_size=12,
)


def _drive(rec, arrivals, ts=TS):
    """Feed (gap_in_steps, value) arrivals, stepping once per EMT step."""
    t = 0
    out, segments = [], []
    for gap, value in arrivals:
        rec.arrive(s(t, value))
        seg = [rec.step() for _ in range(gap)]
        out.extend(seg)
        segments.append(seg)
        t += gap * ts
    return out, segments


@settings(max_examples=1000, deadline=None)
@given(streams)
def test_extrap_k1_zero_piecewise_linear(arrivals):
    e = Extrapolator(n=1, k1=0.0, ts_emt_us=TS)
    _, segments = _drive(e, arrivals)
    for seg in segments[1:]:
        if len(seg) < 3:
            continue
        d2 = np.diff(np.asarray(seg), 2)
        scale = max(1.0, float(np.max(np.abs(seg))))
        assert np.max(np.abs(d2)) <= 1e-12 * scale * len(seg)


@settings(max_examples=1000, deadline=None)
@given(streams)
def test_extrap_full_error_gain_without_slope_is_zoh(arrivals):
    # with dy_s suppressed and k1 = 1 the error term snaps to the newest value
    e = Extrapolator(n=1, k1=1.0, ts_emt_us=TS, slope_clamp=0.0)
    z = ZeroOrderHold()
    got, _ = _drive(e, arrivals)
    ref, _ = _drive(z, arrivals)
    assert np.allclose(got, ref, rtol=0, atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(streams)
def test_extrap_no_gain_no_slope_holds_constant(arrivals):
    # both increments off: the output freezes once the bootstrap ends
    e = Extrapolator(n=1, k1=0.0, ts_emt_us=TS, slope_clamp=0.0)
    got, segments = _drive(e, arrivals)
    frozen = segments[0][-1]
    assert all(v == frozen for seg in segments[1:] for v in seg)


def test_extrap_beats_lpf_on_ramp():
    slope, period = 2.0, 100  # value units per second, steps between arrivals
    e = Extrapolator(n=1, k1=0.001, ts_emt_us=TS)
    f = make_reconstructor("lpf", ts_emt_us=TS, lpf_tau_s=0.01)
    errs_e, errs_f = [], []
    for k in range(200):
        t = k * period * TS
        sample = s(t, slope * t / 1e6)
        e.arrive(sample)
        f.arrive(sample)
        for j in range(period):
            truth = slope * (t + (j + 1) * TS) / 1e6
            errs_e.append(abs(e.step() - truth))
            errs_f.append(abs(f.step() - truth))
    tail = slice(-50 * period, None)
    assert max(errs_e[tail]) < max(errs_f[tail])
    assert max(errs_f[tail]) > slope * 0.01


def test_make_reconstructor_unknown():
    with pytest.raises(ValueError):
        make_reconstructor("spline", ts_emt_us=TS)


# -- metrics ------------------------------------------------------------------

def test_cross_correlation_lag_sign():
    rng = np.random.default_rng(3)
    ref = np.cumsum(rng.normal(size=600))
    cand = np.concatenate([np.full(5, ref[0]), ref[:-5]])
    assert cross_correlation_lag(ref, cand) == 5
    lead = np.concatenate([ref[5:], np.full(5, ref[-1])])
    assert cross_correlation_lag(ref, lead) == -5


def test_cross_correlation_lag_matches_brute_force():
    rng = np.random.default_rng(11)
    ref = np.cumsum(rng.normal(size=300))
    cand = np.roll(ref, 17) + rng.normal(scale=0.1, size=300)
    r, c = ref - ref.mean(), cand - cand.mean()
    lags = range(-40, 41)
    scores = [np.dot(c[max(k, 0):len(c) + min(k, 0)], r[max(-k, 0):len(r) - max(k, 0)]) for k in lags]
    assert cross_correlation_lag(ref, cand, max_lag=40) == list(lags)[int(np.argmax(scores))]


def test_fidelity_identical():
    x = np.sin(np.linspace(0, 10, 500))
    m = fidelity_metrics(x, x)
    assert m.rmse == 0.0
    assert m.lag == 0
    assert m.total_variation == pytest.approx(total_variation(x))


def test_fidelity_shape_mismatch():
    with pytest.raises(ValueError):
        fidelity_metrics([1.0, 2.0], [1.0])


def test_lpf_lags_more_than_extrapolator():
    slope = 1.0
    t_steps = 20_000
    e = Extrapolator(n=1, k1=0.001, ts_emt_us=TS)
    f = make_reconstructor("lpf", ts_emt_us=TS, lpf_tau_s=0.01)
    ref, ye, yf = [], [], []
    for k in range(t_steps):
        t = k * TS
        if k % 100 == 0:
            v = math.sin(2 * math.pi * 0.5 * t / 1e6) * slope
            e.arrive(s(t, v))
            f.arrive(s(t, v))
        ref.append(math.sin(2 * math.pi * 0.5 * t / 1e6) * slope)
        ye.append(e.step())
        yf.append(f.step())
    lag_e = cross_correlation_lag(ref, ye, max_lag=2000)
    lag_f = cross_correlation_lag(ref, yf, max_lag=2000)
    assert lag_f > lag_e
