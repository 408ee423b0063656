"""Experiment configuration: ``key = value`` files plus overrides."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from ..costmodel import CostModelParams
from ..engine import CapacityPolicy, FusionMode
from ..errors import ConfigError

ENGINES = ("sharded", "ep")
ROUTERS = ("linear", "skewed")
MODES = ("execute", "trace")
SCHEDULERS = ("sequential", "threaded")


def default_k_r(num_experts: int) -> int:
    """Ten percent of the experts, rounded half up."""
    return math.floor(0.1 * num_experts + 0.5)


@dataclass(frozen=True)
class ExperimentConfig:
    b: int = 250  # sequences per device
    s: int = 120
    h: int = 768
    d_ff: int = 3072
    num_experts: int = 128
    num_devices: int = 4
    num_layers: int = 12
    router: str = "skewed"
    alpha_r: float = 0.6
    k_r: int | None = None
    engine: str = "sharded"
    fusion: str = "grouped_gemm"
    cf: float | None = None
    compute_rate: float = 19.5e12
    link_bandwidth: float = 600 * 2**30
    launch_overhead: float = 5e-6
    grouped_launch_factor: float = 25.0
    bytes_per_element: int = 4
    seed: int | None = None
    mode: str = "trace"
    scheduler: str = "sequential"
    weights: str | None = None
    output: str | None = None

    @property
    def tokens_per_device(self) -> int:
        return self.b * self.s

    @property
    def skewed_experts(self) -> int:
        return default_k_r(self.num_experts) if self.k_r is None else self.k_r

    @property
    def capacity(self) -> CapacityPolicy:
        return CapacityPolicy(self.cf)

    @property
    def cost_params(self) -> CostModelParams:
        return CostModelParams(
            compute_rate=self.compute_rate,
            link_bandwidth=self.link_bandwidth,
            launch_overhead=self.launch_overhead,
            grouped_launch_factor=self.grouped_launch_factor,
            bytes_per_element=self.bytes_per_element,
        )

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def validate(self) -> ExperimentConfig:
        """Reject bad values and divisibility violations before any compute."""
        for name in ("b", "s", "h", "d_ff", "num_experts", "num_devices", "num_layers", "bytes_per_element"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name, allowed in (("engine", ENGINES), ("router", ROUTERS), ("mode", MODES), ("scheduler", SCHEDULERS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        try:
            FusionMode(self.fusion)
        except ValueError:
            raise ConfigError(
                f"fusion must be one of {[m.value for m in FusionMode]}, got {self.fusion!r}"
            ) from None
        if self.alpha_r < 0:
            raise ConfigError(f"alpha_r must be nonnegative, got {self.alpha_r}")
        if not 0 <= self.skewed_experts <= self.num_experts:
            raise ConfigError(f"k_r={self.skewed_experts} outside [0, {self.num_experts}]")
        if self.engine == "sharded" and self.d_ff % self.num_devices:
            raise ConfigError(
                f"d_ff={self.d_ff} is not divisible by {self.num_devices} devices"
            )
        if self.engine == "ep" and self.num_experts % self.num_devices:
            raise ConfigError(
                f"{self.num_experts} experts cannot be placed evenly on {self.num_devices} devices"
            )
        if self.mode == "trace" and self.router != "skewed":
            raise ConfigError("trace mode needs the skewed router")
        self.capacity
        self.cost_params
        return self


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_INT = {"b", "s", "h", "d_ff", "num_experts", "num_devices", "num_layers", "k_r", "bytes_per_element", "seed"}
_FLOAT = {"alpha_r", "cf", "compute_rate", "link_bandwidth", "launch_overhead", "grouped_launch_factor"}


def coerce(key: str, value: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    if value.lower() in ("none", ""):
        if key in ("k_r", "cf", "seed", "weights", "output"):
            return None
        raise ConfigError(f"{key} cannot be empty")
    try:
        if key in _INT:
            return int(value, 0)
        if key in _FLOAT:
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = value
    return ExperimentConfig(**values).validate()
