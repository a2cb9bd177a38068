import math

import pytest
from hypothesis import given, strategies as st

from cosim.pll import TWO_PI, PccSource, SrfPll, ThreePhaseSample, balanced, park_q, pi_gains, pll_step, wrap_angle

DT = 1e-4


def run_pll(freq_of_t, seconds, v=1.0, theta0=0.0, pll=None):
    pll = pll or SrfPll()
    src = PccSource(theta0)
    trace = []
    for k in range(int(round(seconds / DT))):
        f = freq_of_t(k * DT)
        sample = src.step(v, f, DT)
        _, fe = pll_step(pll, sample, DT)
        trace.append(fe)
        assert 0.0 <= pll.theta < TWO_PI
    return pll, trace


def test_park_q_aligned_is_zero():
    for phase in (0.0, 0.3, 2.0, 5.9):
        assert abs(park_q(balanced(1.0, phase), phase)) < 1e-12


def test_park_q_small_angle_slope():
    delta = 1e-4
    q = park_q(balanced(1.0, 1.0 + delta), 1.0)
    assert q / delta == pytest.approx(1.0, rel=1e-6)


def test_park_q_zero_input():
    assert park_q(ThreePhaseSample(0.0, 0.0, 0.0), 1.2) == 0.0


@given(st.floats(0.0, 1.5), st.floats(0.0, TWO_PI))
def test_balanced_sums_to_zero(v, phase):
    x = balanced(v, phase)
    assert abs(x.va + x.vb + x.vc) < 1e-9


def test_gains():
    kp, ki = pi_gains()
    wn = TWO_PI * 20
    assert kp == pytest.approx(2 * 0.707 * wn)
    assert ki == pytest.approx(wn * wn)


def test_locks_to_60hz():
    _, trace = run_pll(lambda t: 60.0, 0.5, theta0=0.7)
    assert abs(trace[-1] - 60.0) < 0.001


def test_frequency_step_settles():
    _, trace = run_pll(lambda t: 60.0 if t < 0.5 else 59.8, 0.8)
    tail = trace[-int(0.05 / DT):]
    assert max(abs(f - 59.8) for f in tail) < 0.005
    settle = int((0.5 + 0.3) / DT) - 1
    assert abs(trace[settle] - 59.8) < 0.005


@pytest.mark.parametrize("v", [0.5, 1.0, 2.0])
def test_converged_frequency_independent_of_amplitude(v):
    _, trace = run_pll(lambda t: 60.3, 1.5, v=v)
    assert trace[-1] == pytest.approx(60.3, abs=1e-6)


def test_time_origin_shift():
    period = 1 / 60.0
    _, a = run_pll(lambda t: 60.0, 1.0)
    _, b = run_pll(lambda t: 60.0, 1.0, theta0=wrap_angle(TWO_PI * 60.0 * period))
    assert a[-1] == pytest.approx(b[-1], abs=1e-9)


def test_wrap_angle_bounds():
    assert wrap_angle(-1e-18) == 0.0 or 0.0 <= wrap_angle(-1e-18) < TWO_PI
    assert wrap_angle(TWO_PI) == 0.0
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_rejects_bad_input():
    pll = SrfPll()
    with pytest.raises(ValueError):
        pll.step(ThreePhaseSample(math.nan, 0, 0), DT)
    with pytest.raises(ValueError):
        pll.step(balanced(1, 0), 0.0)
