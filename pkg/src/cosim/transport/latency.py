"""Seeded delay distributions used to emulate network and cloud-sync latency."""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..core_time import seconds_to_us


@dataclass(frozen=True)
class LatencyModel:
    """A delay distribution; parameters are in seconds.

    ``fixed`` uses ``value``; ``uniform`` uses ``lo``/``hi``; ``triangular``
    uses ``lo``/``mode``/``hi``.
    """

    kind: str = "fixed"
    value: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    mode: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == "fixed":
            if self.value < 0:
                raise ValueError("fixed delay must be >= 0")
        elif self.kind == "uniform":
            if not 0 <= self.lo <= self.hi:
                raise ValueError("uniform delay needs 0 <= lo <= hi")
        elif self.kind == "triangular":
            if not 0 <= self.lo <= self.mode <= self.hi:
                raise ValueError("triangular delay needs 0 <= lo <= mode <= hi")
        else:
            raise ValueError(f"unknown latency model {self.kind!r}")

    @classmethod
    def fixed(cls, value: float) -> "LatencyModel":
        return cls("fixed", value=value)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "LatencyModel":
        return cls("uniform", lo=lo, hi=hi)

    @classmethod
    def triangular(cls, lo: float, mode: float, hi: float) -> "LatencyModel":
        return cls("triangular", lo=lo, mode=mode, hi=hi)

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyModel":
        d = dict(d)
        kind = d.pop("kind", "fixed")
        return cls(kind, **{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "value": self.value}
        if self.kind == "uniform":
            return {"kind": "uniform", "lo": self.lo, "hi": self.hi}
        return {"kind": "triangular", "lo": self.lo, "mode": self.mode, "hi": self.hi}

    @property
    def mean(self) -> float:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return (self.lo + self.hi) / 2
        return (self.lo + self.mode + self.hi) / 3

    @property
    def bounds(self) -> tuple[float, float]:
        if self.kind == "fixed":
            return self.value, self.value
        return self.lo, self.hi

    def draw(self, rng: random.Random) -> float:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi)
        return rng.triangular(self.lo, self.hi, self.mode)

    def draw_us(self, rng: random.Random) -> int:
        lo, hi = self.bounds
        # clamp so that rounding never leaves the declared support
        return min(max(seconds_to_us(self.draw(rng)), seconds_to_us(lo)), seconds_to_us(hi))


def stream_rng(seed: int, name: str) -> random.Random:
    """Independent, reproducible RNG stream per (seed, link name)."""
    return random.Random(f"{seed}:{name}")
