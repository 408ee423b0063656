"""Running experiments and writing metrics/ECDF CSV files."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..comm import ClusterConfig
from ..costmodel import RunMetrics, ecdf
from ..engine import (
    MoELayer,
    forward_ep_baseline,
    forward_sharded,
    trace_ep,
    trace_sharded,
)
from ..errors import ConfigError
from ..rng import derive_seed
from ..router import LinearRouter, LinearRouterParams, SkewedRouter, SkewedRouterParams
from .config import ExperimentConfig
from .weights import SKEW_STREAM, WeightFile, generate_tokens, generate_weights, load_weights

CSV_COLUMNS = (
    "engine", "fusion", "layers", "experts", "devices", "batch", "seq_len",
    "alpha_r", "k_r", "cf", "drops", "max_dev_tokens", "mean_dev_tokens",
    "bytes_sent_per_dev", "launches", "sim_layer_ms_mean", "sim_ttft_ms", "seed",
)


def make_router(config: ExperimentConfig, layer: int, gate: np.ndarray | None = None):
    if config.router == "linear":
        if gate is None:
            raise ConfigError("the linear router needs gate weights")
        return LinearRouter(LinearRouterParams(gate))
    params = SkewedRouterParams(
        config.alpha_r, config.skewed_experts, derive_seed(config.seed, SKEW_STREAM, layer)
    )
    return SkewedRouter(config.num_experts, params)


def build_layers(config: ExperimentConfig, weights: WeightFile | None = None) -> list[MoELayer]:
    """Layer stack for ``config``; without weights the layers are count-only."""
    if weights is not None:
        dims = (weights.h, weights.d_ff, weights.num_experts)
        if dims != (config.h, config.d_ff, config.num_experts) or weights.num_layers < config.num_layers:
            raise ConfigError(
                f"weights are h={weights.h}, d_ff={weights.d_ff}, E={weights.num_experts}, "
                f"L={weights.num_layers}; config wants h={config.h}, d_ff={config.d_ff}, "
                f"E={config.num_experts}, L={config.num_layers}"
            )
    layers = []
    for l in range(config.num_layers):
        lw = weights.layers[l] if weights is not None else None
        router = make_router(config, l, lw.gate if lw else None)
        layers.append(MoELayer(config.h, config.d_ff, router, lw.experts if lw else None))
    return layers


def load_layers(path, config: ExperimentConfig) -> list[MoELayer]:
    return build_layers(config, load_weights(path))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: RunMetrics
    outputs: list[np.ndarray] | None = None

    def row(self) -> dict:
        c, m = self.config, self.metrics
        tokens = m.total_per_device("tokens_assigned")
        skewed = c.router == "skewed"
        return {
            "engine": c.engine,
            "fusion": m.fusion,
            "layers": c.num_layers,
            "experts": c.num_experts,
            "devices": c.num_devices,
            "batch": c.b,
            "seq_len": c.s,
            "alpha_r": f"{c.alpha_r:g}" if skewed else "none",
            "k_r": c.skewed_experts if skewed else "none",
            "cf": f"{c.capacity.factor(c.num_experts):g}" if c.engine == "ep" else "none",
            "drops": m.drops,
            "max_dev_tokens": int(tokens.max()),
            "mean_dev_tokens": f"{tokens.mean():.3f}",
            "bytes_sent_per_dev": f"{m.total_per_device('bytes_sent').mean():.1f}",
            "launches": int(m.total_per_device("kernel_launches").max()),
            "sim_layer_ms_mean": f"{1e3 * np.mean(m.layer_latency):.6f}",
            "sim_ttft_ms": f"{1e3 * m.simulated_ttft:.6f}",
            "seed": c.seed,
        }


def run_experiment(config: ExperimentConfig, weights: WeightFile | None = None) -> ExperimentResult:
    config.validate()
    if config.seed is None:
        raise ConfigError("a seed is required to run an experiment")
    cluster = ClusterConfig(config.num_devices, config.bytes_per_element)
    n = [config.tokens_per_device] * config.num_devices
    if config.mode == "trace":
        layers = build_layers(config)
        if config.engine == "sharded":
            metrics = trace_sharded(n, layers, cluster, config.fusion)
        else:
            metrics = trace_ep(n, layers, cluster, config.capacity)
        return ExperimentResult(config, metrics.simulate(config.cost_params))

    if weights is None:
        if config.weights:
            weights = load_weights(config.weights)
        else:
            weights = generate_weights(config.h, config.d_ff, config.num_experts, config.num_layers, config.seed)
    layers = build_layers(config, weights)
    xs = [generate_tokens(n[g], config.h, config.seed, g) for g in range(config.num_devices)]
    if config.engine == "sharded":
        outputs, metrics = forward_sharded(xs, layers, cluster, config.fusion, config.scheduler)
    else:
        outputs, metrics = forward_ep_baseline(xs, layers, cluster, config.capacity, config.scheduler)
    return ExperimentResult(config, metrics.simulate(config.cost_params), outputs)


def sweep_configs(base: ExperimentConfig, experts=None, batches=None, engines=None, fusions=None):
    """Cartesian product over the given axes, experts outermost."""
    experts = experts or [base.num_experts]
    batches = batches or [base.b]
    engines = engines or [base.engine]
    fusions = fusions or [base.fusion]
    for e, b, engine in itertools.product(experts, batches, engines):
        for fusion in (fusions if engine == "sharded" else [base.fusion]):
            yield base.replace(num_experts=e, b=b, engine=engine, fusion=fusion).validate()


def run_sweep(base: ExperimentConfig, **axes) -> list[ExperimentResult]:
    return [run_experiment(c) for c in sweep_configs(base, **axes)]


def format_rows(rows, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    if header:
        w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def append_rows(path: str | Path, rows) -> None:
    """Append rows, writing the header first when the file is new or empty."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", encoding="utf-8", newline="") as f:
        f.write(format_rows(rows, header=fresh))


def ecdf_layers(num_layers: int) -> list[int]:
    """First and last layer indices (one entry when they coincide)."""
    return sorted({0, num_layers - 1})


def emit_ecdf(metrics: RunMetrics, path: str | Path, layers=None) -> list[Path]:
    """Write ``<stem>_layer<i>.csv`` per requested layer; returns the paths."""
    path = Path(path)
    layers = ecdf_layers(len(metrics.layers)) if layers is None else layers
    written = []
    for i in layers:
        series = ecdf(metrics.layers[i].expert_counts)
        out = path.with_name(f"{path.stem}_layer{i}.csv")
        with out.open("w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["expert_id", "token_count", "cumulative_fraction"])
            for e, c, frac in zip(series.expert_id, series.token_count, series.cumulative_fraction):
                w.writerow([int(e), int(c), f"{frac:.6f}"])
        written.append(out)
    return written
