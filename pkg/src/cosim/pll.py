"""Synchronous-reference-frame PLL and the PCC waveform it locks onto."""

from __future__ import annotations

import math
from dataclasses import dataclass

TWO_PI = 2.0 * math.pi
_SIXTH = TWO_PI / 3.0


def wrap_angle(theta: float) -> float:
    theta = theta % TWO_PI
    # x % 2pi can round up to exactly 2pi for tiny negative x.
    return 0.0 if theta >= TWO_PI else theta


@dataclass(frozen=True)
class ThreePhaseSample:
    va: float
    vb: float
    vc: float
    sim_time: int = 0


def park_q(sample: ThreePhaseSample, theta: float) -> float:
    """Amplitude-invariant q-axis component of ``(va, vb, vc)`` at ``theta``.

    For a balanced set ``V*cos(phi + k*2pi/3)`` this is ``V*sin(phi - theta)``.
    """
    return -(2.0 / 3.0) * (
        sample.va * math.sin(theta)
        + sample.vb * math.sin(theta - _SIXTH)
        + sample.vc * math.sin(theta + _SIXTH)
    )


def pi_gains(zeta: float = 0.707, omega_n: float = TWO_PI * 20.0, v_ref: float = 1.0) -> tuple[float, float]:
    """PI gains placing the linearized loop at (zeta, omega_n) for amplitude ``v_ref``."""
    return 2.0 * zeta * omega_n / v_ref, omega_n * omega_n / v_ref


class SrfPll:
    def __init__(
        self,
        f_nominal: float = 60.0,
        zeta: float = 0.707,
        omega_n: float = TWO_PI * 20.0,
        theta0: float = 0.0,
    ) -> None:
        self.f_nominal = f_nominal
        self.kp, self.ki = pi_gains(zeta, omega_n)
        self.theta = wrap_angle(theta0)
        self.integrator = 0.0
        self.omega = TWO_PI * f_nominal

    @property
    def freq_hz(self) -> float:
        return self.omega / TWO_PI

    def step(self, sample: ThreePhaseSample, dt_s: float) -> tuple[float, float]:
        """Advance one step; return ``(theta, freq_hz)``."""
        if not dt_s > 0:
            raise ValueError("dt must be positive")
        va, vb, vc = sample.va, sample.vb, sample.vc
        if not (math.isfinite(va) and math.isfinite(vb) and math.isfinite(vc)):
            raise ValueError("non-finite PLL input")
        th = self.theta
        q = -(2.0 / 3.0) * (va * math.sin(th) + vb * math.sin(th - _SIXTH) + vc * math.sin(th + _SIXTH))
        self.integrator += self.ki * q * dt_s
        self.omega = TWO_PI * self.f_nominal + self.kp * q + self.integrator
        self.theta = wrap_angle(th + self.omega * dt_s)
        return self.theta, self.omega / TWO_PI


def pll_step(state: SrfPll, sample: ThreePhaseSample, dt_s: float) -> tuple[float, float]:
    return state.step(sample, dt_s)


class PccSource:
    """Three-phase voltage source built from a magnitude and frequency stream.

    The source angle integrates the supplied frequency every step, so a
    coarse frequency stream shows up as kinks in the phase trajectory.
    """

    def __init__(self, theta0: float = 0.0) -> None:
        self.theta = wrap_angle(theta0)

    def step(self, v_mag: float, freq_hz: float, dt_s: float, sim_time: int = 0) -> ThreePhaseSample:
        self.theta = wrap_angle(self.theta + TWO_PI * freq_hz * dt_s)
        th = self.theta
        return ThreePhaseSample(
            v_mag * math.cos(th),
            v_mag * math.cos(th - _SIXTH),
            v_mag * math.cos(th + _SIXTH),
            sim_time,
        )


def balanced(v_mag: float, phase: float, sim_time: int = 0) -> ThreePhaseSample:
    return ThreePhaseSample(
        v_mag * math.cos(phase),
        v_mag * math.cos(phase - _SIXTH),
        v_mag * math.cos(phase + _SIXTH),
        sim_time,
    )
