"""Run metrics, the barrier-phase latency model and load statistics.

Latency of one layer is the sum, over the costed phases, of the slowest
device's time in that phase::

    t_phase(d) = flops/compute_rate + bytes_sent/link_bandwidth
                 + launches*launch_overhead
                 + grouped_launches*launch_overhead*grouped_launch_factor

The route phase is free (non-expert compute is not modelled) and the
metadata exchange is logged but not costed. ``grouped_launch_factor`` is the
extra setup cost of one grouped (block-sparse) product relative to a plain
launch; together with ``launch_overhead`` it decides at which expert count
grouped products start to beat one launch per expert.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

PHASES = ("route", "metadata", "scatter", "compute", "gather", "aggregate")
COSTED_PHASES = ("scatter", "compute", "gather", "aggregate")

GIB = 2**30
MIB = 2**20


@dataclass(frozen=True)
class CostModelParams:
    compute_rate: float = 19.5e12
    link_bandwidth: float = 600 * GIB
    launch_overhead: float = 5e-6
    grouped_launch_factor: float = 25.0
    bytes_per_element: int = 4

    def __post_init__(self):
        for name in ("compute_rate", "link_bandwidth", "bytes_per_element"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive, got {getattr(self, name)}")
        # Zero overheads are allowed as the overhead-free limit.
        for name in ("launch_overhead", "grouped_launch_factor"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")


@dataclass
class PhaseCounters:
    flops: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    launches: int = 0
    grouped_launches: int = 0


@dataclass
class DeviceLayerMetrics:
    phases: dict[str, PhaseCounters] = field(
        default_factory=lambda: {p: PhaseCounters() for p in PHASES}
    )
    # Tokens whose expert work this device performs (all tokens when sharded).
    tokens_assigned: int = 0
    tokens_processed: int = 0
    drops: int = 0
    # Bytes including the copy a device addresses to itself.
    bytes_sent_with_local: int = 0
    bytes_received_with_local: int = 0

    @property
    def expert_flops(self) -> int:
        return self.phases["compute"].flops

    @property
    def bytes_sent(self) -> int:
        return sum(c.bytes_sent for c in self.phases.values())

    @property
    def bytes_received(self) -> int:
        return sum(c.bytes_received for c in self.phases.values())

    @property
    def kernel_launches(self) -> int:
        return sum(c.launches + c.grouped_launches for c in self.phases.values())


@dataclass
class LayerMetrics:
    devices: list[DeviceLayerMetrics]
    expert_counts: np.ndarray

    @property
    def drops(self) -> int:
        return sum(d.drops for d in self.devices)

    def per_device(self, attr: str) -> np.ndarray:
        return np.array([getattr(d, attr) for d in self.devices])


@dataclass
class RunMetrics:
    engine: str
    fusion: str
    layers: list[LayerMetrics]
    layer_latency: list[float] = field(default_factory=list)

    @property
    def num_devices(self) -> int:
        return len(self.layers[0].devices) if self.layers else 0

    @property
    def drops(self) -> int:
        return sum(layer.drops for layer in self.layers)

    def total_per_device(self, attr: str) -> np.ndarray:
        return sum(layer.per_device(attr) for layer in self.layers)

    def simulate(self, params: CostModelParams) -> RunMetrics:
        self.layer_latency = [simulate_layer_latency(layer, params) for layer in self.layers]
        return self

    @property
    def simulated_ttft(self) -> float:
        return ttft(self.layer_latency)

    def equal_counters(self, other: RunMetrics) -> bool:
        """Compare every counter and per-expert count (not latencies)."""
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if not np.array_equal(a.expert_counts, b.expert_counts) or a.devices != b.devices:
                return False
        return True


def device_phase_time(c: PhaseCounters, params: CostModelParams) -> float:
    return (
        c.flops / params.compute_rate
        + c.bytes_sent / params.link_bandwidth
        + c.launches * params.launch_overhead
        + c.grouped_launches * params.launch_overhead * params.grouped_launch_factor
    )


def transfer_time(num_bytes: int, params: CostModelParams) -> float:
    return num_bytes / params.link_bandwidth


def simulate_layer_latency(layer: LayerMetrics, params: CostModelParams) -> float:
    """Sum over phases of the slowest device: every phase ends in a barrier."""
    total = 0.0
    for phase in COSTED_PHASES:
        total += max(device_phase_time(d.phases[phase], params) for d in layer.devices)
    return total


def ttft(layer_latencies) -> float:
    return float(sum(layer_latencies))


@dataclass(frozen=True)
class LoadBalance:
    max: float
    mean: float
    ratio: float


def load_balance_stats(per_device) -> LoadBalance:
    v = np.asarray(per_device, dtype=np.float64)
    if v.size == 0:
        raise ValueError("load_balance_stats needs at least one device")
    mx, mean = float(v.max()), float(v.mean())
    ratio = mx / mean if mean > 0 else 1.0
    return LoadBalance(mx, mean, ratio)


@dataclass(frozen=True)
class EcdfSeries:
    """Per-expert counts sorted ascending with the fraction of experts <= each."""

    expert_id: np.ndarray
    token_count: np.ndarray
    cumulative_fraction: np.ndarray

    def steps(self) -> list[tuple[int, float]]:
        """Distinct counts with the ECDF value reached at each."""
        out: dict[int, float] = {}
        for c, f in zip(self.token_count.tolist(), self.cumulative_fraction.tolist()):
            out[c] = f
        return list(out.items())


def ecdf(counts) -> EcdfSeries:
    counts = np.asarray(counts, dtype=np.int64)
    n = len(counts)
    if n < 1:
        raise ValueError("ecdf needs at least one expert")
    order = np.argsort(counts, kind="stable")
    sorted_counts = counts[order]
    # Fraction of experts with count <= value, constant across ties.
    le = np.searchsorted(sorted_counts, sorted_counts, side="right")
    return EcdfSeries(order, sorted_counts, le / n)
