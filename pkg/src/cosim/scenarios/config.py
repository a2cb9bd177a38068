"""Scenario configuration: one JSON document per run.

Validation errors name the offending field, e.g. ``vpn_td.update_cycle.hi``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..core_time import StepConfig, seconds_to_us
from ..signals import SMOOTHERS
from ..transport import LatencyModel

ScenarioName = Literal["local_lg", "fileshare_loadfollow", "vpn_td"]
SmootherName = Literal["zoh", "lpf", "extrap"]

DEFAULT_DURATION_S = {"local_lg": 500.0, "fileshare_loadfollow": 600.0, "vpn_td": 4.0}
DEFAULT_TS_PHASOR_US = {"local_lg": 1_000, "fileshare_loadfollow": 1_000, "vpn_td": 10_000}
DEFAULT_TRANSPORT = {
    "local_lg": {"kind": "loopback", "latency": {"kind": "fixed", "value": 0.001}},
    "fileshare_loadfollow": {"kind": "fileshare", "latency": {"kind": "triangular", "lo": 1.0, "mode": 2.5, "hi": 8.5}},
    "vpn_td": {"kind": "socket", "latency": {"kind": "fixed", "value": 0.020}},
}


class ConfigError(ValueError):
    """Raised for unreadable or invalid configuration; message lists fields."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LatencySpec(_Model):
    kind: Literal["fixed", "uniform", "triangular"] = "fixed"
    value: float = Field(0.0, ge=0)
    lo: float = Field(0.0, ge=0)
    hi: float = Field(0.0, ge=0)
    mode: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _consistent(self) -> "LatencySpec":
        self.model()  # LatencyModel checks ordering of lo/mode/hi
        return self

    def model(self) -> LatencyModel:
        return LatencyModel(self.kind, self.value, self.lo, self.hi, self.mode)


class StepSpec(_Model):
    ts_emt_us: int = Field(100, gt=0)
    ts_phasor_us: Optional[int] = Field(None, gt=0)
    mcs_interval_s: float = Field(300.0, gt=0, le=300.0)


class TransportSpec(_Model):
    kind: Literal["loopback", "socket", "fileshare"]
    latency: LatencySpec = Field(default_factory=LatencySpec)
    host: str = "127.0.0.1"
    port: int = Field(0, ge=0, le=65535)


class SmootherSpec(_Model):
    lpf_tau_s: float = Field(0.01, gt=0)
    extrap_n: int = Field(1, ge=1)
    extrap_k1: float = Field(0.001, ge=0)
    slope_clamp: Optional[float] = Field(None, gt=0)


class OutageSpec(_Model):
    start_s: float = Field(ge=0)
    duration_s: float = Field(gt=0)


class LocalLgSpec(_Model):
    poll_period_s: float = Field(1.0, gt=0)
    forward_period_s: Optional[float] = Field(None, gt=0)
    mcs_interval_s: float = Field(1.0, gt=0, le=300.0)
    mcs_compute_us: int = Field(10_000, ge=0)
    group_spacing_s: float = Field(100.0, gt=0)
    group_p_w: list[float] = Field(default_factory=lambda: [400e3, 300e3, 500e3, 350e3, 450e3], min_length=1)
    base_p_w: float = Field(200e3, ge=0)
    pickup_tau_s: float = Field(0.2, gt=0)
    rts_to_iface_us: int = Field(200, ge=0)
    iface_process_up_us: int = Field(50, ge=0)
    iface_process_down_us: int = Field(50, ge=0)
    iface_to_rts_us: int = Field(200, ge=0)
    outage: Optional[OutageSpec] = None
    write_truth: bool = True
    jsonl_log: bool = False


class FileshareSpec(_Model):
    n_nodes: int = Field(500, ge=1)
    publish_period_s: float = Field(60.0, gt=0)
    watch_period_s: float = Field(0.5, gt=0)
    publish_cycles: Optional[int] = Field(None, ge=1)
    node_p_min_w: float = Field(0.5e6, ge=0)
    node_p_max_w: float = Field(2.0e6, ge=0)
    trace_period_s: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _range(self) -> "FileshareSpec":
        if self.node_p_max_w < self.node_p_min_w:
            raise ValueError("node_p_max_w must be >= node_p_min_w")
        return self


class FaultSpec(_Model):
    start_s: float = Field(2.0, ge=0)
    cycles: float = Field(5.0, gt=0)
    residual_v: float = Field(0.4, ge=0, le=1.5)
    swing_hz: float = Field(0.2, ge=0)
    swing_freq_hz: float = Field(1.5, ge=0)
    swing_decay_s: float = Field(1.0, gt=0)


class VpnTdSpec(_Model):
    update_cycle: LatencySpec = Field(default_factory=lambda: LatencySpec(kind="uniform", lo=0.017, hi=0.035))
    fault: Optional[FaultSpec] = Field(default_factory=FaultSpec)
    ambient_hz: float = Field(0.02, ge=0)
    ambient_freq_hz: float = Field(0.5, ge=0)
    p_nom_w: float = Field(1.0e6, ge=0)
    q_nom_var: float = Field(0.3e6, ge=0)
    pq_period_us: Optional[int] = Field(None, gt=0)
    steady_window_s: tuple[float, Optional[float]] = (0.5, None)
    transient_window_s: tuple[float, float] = (-0.1, 1.5)


class AnalysisSpec(_Model):
    histogram_bin_s: Optional[float] = Field(None, gt=0)
    latency_bins: int = Field(20, ge=1)


class ScenarioConfig(_Model):
    scenario: ScenarioName
    mode: Literal["virtual", "realtime"] = "virtual"
    seed: Optional[int] = None
    duration_s: Optional[float] = Field(None, gt=0)
    steps: StepSpec = Field(default_factory=StepSpec)
    transport: Optional[TransportSpec] = None
    smoothers: list[SmootherName] = Field(default_factory=lambda: list(SMOOTHERS), min_length=1)
    smoother_params: SmootherSpec = Field(default_factory=SmootherSpec)
    local_lg: LocalLgSpec = Field(default_factory=LocalLgSpec)
    fileshare: FileshareSpec = Field(default_factory=FileshareSpec)
    vpn_td: VpnTdSpec = Field(default_factory=VpnTdSpec)
    analysis: AnalysisSpec = Field(default_factory=AnalysisSpec)

    @field_validator("smoothers")
    @classmethod
    def _unique(cls, v: list[str]) -> list[str]:
        if len(set(v)) != len(v):
            raise ValueError("smoothers must not repeat")
        return v

    @model_validator(mode="after")
    def _fill_defaults(self) -> "ScenarioConfig":
        if self.mode == "virtual" and self.seed is None:
            raise ValueError("seed is required in virtual mode")
        if self.duration_s is None:
            if self.scenario == "fileshare_loadfollow" and self.fileshare.publish_cycles:
                self.duration_s = self.fileshare.publish_cycles * self.fileshare.publish_period_s
            else:
                self.duration_s = DEFAULT_DURATION_S[self.scenario]
        if self.steps.ts_phasor_us is None:
            self.steps.ts_phasor_us = DEFAULT_TS_PHASOR_US[self.scenario]
        if self.transport is None:
            self.transport = TransportSpec(**DEFAULT_TRANSPORT[self.scenario])
        self.step_config()
        return self

    def step_config(self) -> StepConfig:
        return StepConfig(self.steps.ts_emt_us, self.steps.ts_phasor_us, seconds_to_us(self.steps.mcs_interval_s))

    @property
    def duration_us(self) -> int:
        return seconds_to_us(self.duration_s)

    def echo(self) -> dict:
        return self.model_dump(mode="json")


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict, seed: int | None = None, mode: str | None = None) -> ScenarioConfig:
    """Validate a config mapping; CLI overrides win over file values."""
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a JSON object")
    data = dict(data)
    if seed is not None:
        data["seed"] = seed
    if mode is not None:
        data["mode"] = mode
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path: str | Path, seed: int | None = None, mode: str | None = None) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(data, seed, mode)
