"""Forward passes over a stack of MoE layers.

``forward_sharded`` runs the expert-sharded pipeline: every device routes its
own tokens, broadcasts per-expert counts, replicates its bucketed tokens to
all devices, applies its shard of every expert to every token, sends the
partial outputs home and sums them in ascending rank order.

``forward_ep_baseline`` is classic expert parallelism: contiguous blocks of
experts per device, tokens moved to the device hosting their expert, and a
capacity cap per expert beyond which tokens are dropped (zero output).

Both return per-device outputs and a :class:`RunMetrics` with the counters
the cost model needs. ``trace_sharded``/``trace_ep`` produce the same
counters from routing counts alone, for shapes too large to execute.

Non-expert work (attention, the router itself) is treated as free. Gate
scaling is applied on the home device after aggregation, once per token,
exactly as in the dense reference.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .comm import (
    AllToAll,
    ClusterConfig,
    InboxTable,
    count_per_expert,
    get_scheduler,
    group_per_expert,
    split_by_sizes,
    unpack_inbox,
)
from .costmodel import DeviceLayerMetrics, LayerMetrics, PhaseCounters, RunMetrics
from .errors import ConfigError, DivisibilityError, ShapeError
from .expert import ExpertParams, ExpertShard, expert_forward_dense, extract_shard, make_shard_plan
from .router import Router, SkewedRouter, check_assignment
from .tensor import Matrix, add_into, concat_rows, matmul, relu, scale_rows


class FusionMode(str, enum.Enum):
    PER_GPU_PER_EXPERT = "per_gpu_per_expert"
    FUSED_PER_EXPERT = "fused_per_expert"
    GROUPED_GEMM = "grouped_gemm"


@dataclass(frozen=True)
class CapacityPolicy:
    """Capacity factor; ``cf=None`` means ``min(num_experts, 50)``."""

    cf: float | None = None

    def __post_init__(self):
        if self.cf is not None and self.cf < 0:
            raise ConfigError(f"capacity factor must be nonnegative, got {self.cf}")

    def factor(self, num_experts: int) -> float:
        return min(num_experts, 50) if self.cf is None else self.cf

    def capacity(self, total_tokens: int, num_experts: int) -> int:
        """``ceil(cf * T / |E|)`` computed exactly."""
        cf = Fraction(str(self.factor(num_experts)))
        return math.ceil(cf * total_tokens / num_experts)


@dataclass(frozen=True)
class MoELayer:
    d_model: int
    d_ff: int
    router: Router
    experts: tuple[ExpertParams, ...] | None = None

    def __post_init__(self):
        if self.router.num_experts < 1:
            raise ConfigError("a layer needs at least one expert")
        if self.experts is not None:
            if len(self.experts) != self.num_experts:
                raise ShapeError(
                    f"{len(self.experts)} experts for a router over {self.num_experts}"
                )
            for e in self.experts:
                if (e.d_model, e.d_ff) != (self.d_model, self.d_ff):
                    raise ShapeError(
                        f"expert {e.expert_id} is {e.d_model}x{e.d_ff}, "
                        f"layer is {self.d_model}x{self.d_ff}"
                    )

    @property
    def num_experts(self) -> int:
        return self.router.num_experts


def ep_placement(num_experts: int, num_devices: int) -> np.ndarray:
    """Owner rank of each expert: contiguous blocks of ``|E|/|G|``."""
    if num_experts % num_devices:
        raise DivisibilityError(
            f"{num_experts} experts cannot be placed evenly on {num_devices} devices"
        )
    return np.arange(num_experts) // (num_experts // num_devices)


def _ffn_flops(rows: int, d_model: int, width: int) -> int:
    # Two products, two FLOPs per multiply-accumulate.
    return 4 * rows * d_model * width


# -- expert compute -----------------------------------------------------------


def grouped_matmul(a: Matrix, group_sizes: Sequence[int], weights: Sequence[Matrix]) -> Matrix:
    """One product over row blocks of variable size, block ``e`` times ``weights[e]``.

    Accumulates in ascending ``k`` exactly like :func:`matmul`, so every row
    is bit-identical to multiplying its block separately.
    """
    group_sizes = np.asarray(group_sizes, dtype=np.int64)
    if group_sizes.sum() != a.shape[0] or len(group_sizes) != len(weights):
        raise ShapeError(f"group sizes {group_sizes.tolist()} do not cover {a.shape[0]} rows")
    stack = np.stack([w.astype(a.dtype, copy=False) for w in weights])
    if stack.shape[1] != a.shape[1]:
        raise ShapeError(f"grouped matmul shape mismatch: {a.shape} @ {stack.shape[1:]}")
    gid = np.repeat(np.arange(len(weights)), group_sizes)
    out = np.zeros((a.shape[0], stack.shape[2]), dtype=a.dtype)
    for k in range(a.shape[1]):
        out += a[:, k, None] * stack[gid, k, :]
    return out


def fused_expert_compute(
    inbox: InboxTable, shards: Sequence[ExpertShard], mode: FusionMode | str
) -> tuple[InboxTable, PhaseCounters]:
    """Apply this rank's shard of each expert to every block of ``inbox``.

    Launch accounting: one per nonempty ``(g, e)`` product, one per nonempty
    expert after fusing sources, or two grouped products for the whole rank.
    """
    mode = FusionMode(mode)
    G, E = inbox.num_sources, inbox.num_experts
    if len(shards) != E:
        raise ShapeError(f"{len(shards)} shards for {E} experts")
    counters = PhaseCounters()
    out = [[None] * E for _ in range(G)]

    def run(rows: Matrix, s: ExpertShard) -> Matrix:
        dtype = rows.dtype
        hidden = relu(matmul(rows, s.W_i_g.astype(dtype, copy=False)))
        counters.flops += _ffn_flops(rows.shape[0], s.W_i_g.shape[0], s.W_i_g.shape[1])
        return matmul(hidden, s.W_o_g.astype(dtype, copy=False))

    if mode is FusionMode.PER_GPU_PER_EXPERT:
        for g in range(G):
            for e in range(E):
                block = inbox[g][e]
                if block.shape[0]:
                    out[g][e] = run(block, shards[e])
                    counters.launches += 1
                else:
                    out[g][e] = block.copy()
        return InboxTable(out), counters

    sizes = inbox.sizes()
    per_expert = [concat_rows([inbox[g][e] for g in range(G)]) for e in range(E)]
    if mode is FusionMode.FUSED_PER_EXPERT:
        results = []
        for e in range(E):
            rows = per_expert[e]
            if rows.shape[0]:
                results.append(run(rows, shards[e]))
                counters.launches += 1
            else:
                results.append(rows.copy())
    else:
        rows = concat_rows(per_expert)
        group_sizes = sizes.sum(axis=0)
        if rows.shape[0]:
            hidden = relu(grouped_matmul(rows, group_sizes, [s.W_i_g for s in shards]))
            y = grouped_matmul(hidden, group_sizes, [s.W_o_g for s in shards])
            counters.grouped_launches += 2
            d_model, width = shards[0].W_i_g.shape
            counters.flops += _ffn_flops(rows.shape[0], d_model, width)
        else:
            y = rows.copy()
        results = split_by_sizes(y, group_sizes)
    for e in range(E):
        for g, block in enumerate(split_by_sizes(results[e], sizes[:, e])):
            out[g][e] = block
    return InboxTable(out), counters


# -- reference ----------------------------------------------------------------


def reference_forward_dense(x: Matrix, layers: Sequence[MoELayer], rank: int = 0) -> Matrix:
    """Single-device oracle: route each token, apply its full expert, scale.

    ``rank`` selects the skewed router's stream so the routing matches the
    device of the same rank in the distributed engines.
    """
    for layer in layers:
        if layer.experts is None:
            raise ConfigError("reference forward needs expert weights")
        if x.shape[1] != layer.d_model:
            raise ShapeError(f"tokens {x.shape} for a layer of width {layer.d_model}")
        a = layer.router.route(x, rank)
        check_assignment(a, x.shape[0], layer.num_experts)
        out = np.zeros_like(x)
        for e, params in enumerate(layer.experts):
            idx = np.flatnonzero(a.m_expert == e)
            if len(idx):
                out[idx] = expert_forward_dense(x[idx], params)
        x = scale_rows(out, a.gate_scale)
    return x


# -- device programs ---------------------------------------------------------


def _account(c: PhaseCounters, rec: DeviceLayerMetrics, rank: int, sent, received, size_of) -> None:
    for peer, payload in enumerate(sent):
        nbytes = size_of(payload)
        rec.bytes_sent_with_local += nbytes
        if peer != rank:
            c.bytes_sent += nbytes
    for peer, payload in enumerate(received):
        nbytes = size_of(payload)
        rec.bytes_received_with_local += nbytes
        if peer != rank:
            c.bytes_received += nbytes


def _metadata_size(v) -> int:
    return len(v) * 8


def _sharded_program(rank, x, layers, shards_by_layer, cluster: ClusterConfig, fusion):
    G, bpe = cluster.num_devices, cluster.bytes_per_element

    def matrix_size(m):
        return m.shape[0] * m.shape[1] * bpe

    records = []
    for layer, shards in zip(layers, shards_by_layer):
        rec = DeviceLayerMetrics()
        E, h, n = layer.num_experts, layer.d_model, x.shape[0]

        # Step 1: routing.
        a = layer.router.route(x, rank)
        check_assignment(a, n, E)

        # Step 2: bucket and exchange counts.
        buckets = group_per_expert(x, a.m_expert, E)
        sent = [buckets.sizes] * G
        received = yield AllToAll("metadata", sent)
        _account(rec.phases["metadata"], rec, rank, sent, received, _metadata_size)
        table = np.array(received, dtype=np.int64)

        # Step 3: replicate the concatenated buckets to every device.
        sent = [buckets.concatenated()] * G
        received = yield AllToAll("scatter", sent)
        _account(rec.phases["scatter"], rec, rank, sent, received, matrix_size)
        inbox = unpack_inbox(received, table)

        # Step 4: this rank's shard of every expert over all tokens.
        processed, rec.phases["compute"] = fused_expert_compute(inbox, shards, fusion)
        rec.tokens_assigned = rec.tokens_processed = int(table.sum())

        # Step 5: partial outputs go home; sum in ascending rank order.
        sent = [processed.pack(g) for g in range(G)]
        received = yield AllToAll("gather", sent)
        _account(rec.phases["gather"], rec, rank, sent, received, matrix_size)
        acc = received[0]
        for part in received[1:]:
            acc = add_into(acc, part)
        out = scale_rows(acc, buckets.permute(a.gate_scale))
        rec.phases["aggregate"].flops = G * n * h
        x = buckets.ungroup(out)
        records.append((rec, table.sum(axis=0)))
    return x, records


def _ep_program(rank, x, layers, hosted_by_layer, cluster: ClusterConfig, policy: CapacityPolicy):
    G, bpe = cluster.num_devices, cluster.bytes_per_element

    def matrix_size(m):
        return m.shape[0] * m.shape[1] * bpe

    records = []
    for layer, hosted in zip(layers, hosted_by_layer):
        rec = DeviceLayerMetrics()
        E, h, n = layer.num_experts, layer.d_model, x.shape[0]
        per = E // G
        lo = rank * per

        a = layer.router.route(x, rank)
        check_assignment(a, n, E)
        buckets = group_per_expert(x, a.m_expert, E)
        sent = [buckets.sizes] * G
        received = yield AllToAll("metadata", sent)
        _account(rec.phases["metadata"], rec, rank, sent, received, _metadata_size)
        table = np.array(received, dtype=np.int64)
        capacity = policy.capacity(int(table.sum()), E)

        sent = [concat_rows(buckets.buckets[d * per : (d + 1) * per], cols=h, dtype=x.dtype) for d in range(G)]
        received = yield AllToAll("scatter", sent)
        _account(rec.phases["scatter"], rec, rank, sent, received, matrix_size)
        local_sizes = table[:, lo : lo + per]
        inbox = unpack_inbox(received, local_sizes)

        compute = rec.phases["compute"]
        returned = [[None] * per for _ in range(G)]
        for j, params in enumerate(hosted):
            rows = concat_rows([inbox[src][j] for src in range(G)])
            # First come, first served: source rank, then input order.
            admitted = min(rows.shape[0], capacity)
            y = np.zeros_like(rows)
            if admitted:
                y[:admitted] = expert_forward_dense(rows[:admitted], params)
                compute.launches += 1
                compute.flops += _ffn_flops(admitted, h, layer.d_ff)
            rec.tokens_assigned += rows.shape[0]
            rec.tokens_processed += admitted
            rec.drops += rows.shape[0] - admitted
            for src, block in enumerate(split_by_sizes(y, local_sizes[:, j])):
                returned[src][j] = block

        sent = [concat_rows(returned[src], cols=h, dtype=x.dtype) for src in range(G)]
        received = yield AllToAll("gather", sent)
        _account(rec.phases["gather"], rec, rank, sent, received, matrix_size)
        # Contiguous placement: ascending owner rank is ascending expert order.
        out = scale_rows(concat_rows(received), buckets.permute(a.gate_scale))
        rec.phases["aggregate"].flops = n * h
        x = buckets.ungroup(out)
        records.append((rec, table.sum(axis=0)))
    return x, records


def _collect(engine: str, fusion: str, results) -> tuple[list[Matrix], RunMetrics]:
    outputs = [r[0] for r in results]
    num_layers = len(results[0][1])
    layers = []
    for l in range(num_layers):
        devices = [r[1][l][0] for r in results]
        layers.append(LayerMetrics(devices, results[0][1][l][1]))
    return outputs, RunMetrics(engine, fusion, layers)


def _validate_inputs(xs, layers, cluster):
    if len(xs) != cluster.num_devices:
        raise ShapeError(f"{len(xs)} token matrices for {cluster.num_devices} devices")
    if not layers:
        raise ConfigError("need at least one layer")
    for layer in layers:
        if layer.experts is None:
            raise ConfigError("executing a forward pass needs expert weights")
        if layer.d_model != layers[0].d_model:
            raise ShapeError("all layers of a stack must share d_model")
    for g, x in enumerate(xs):
        if x.ndim != 2 or x.shape[1] != layers[0].d_model:
            raise ShapeError(f"device {g} tokens have shape {x.shape}, want [n, {layers[0].d_model}]")


def forward_sharded(
    xs: Sequence[Matrix],
    layers: Sequence[MoELayer],
    cluster: ClusterConfig,
    fusion: FusionMode | str = FusionMode.GROUPED_GEMM,
    scheduler=None,
) -> tuple[list[Matrix], RunMetrics]:
    fusion = FusionMode(fusion)
    _validate_inputs(xs, layers, cluster)
    G = cluster.num_devices
    shards = [[None] * len(layers) for _ in range(G)]
    for l, layer in enumerate(layers):
        plan = make_shard_plan(layer.d_ff, G)
        for g in range(G):
            shards[g][l] = [extract_shard(e, plan, g) for e in layer.experts]
    programs = [_sharded_program(g, xs[g], layers, shards[g], cluster, fusion) for g in range(G)]
    results = get_scheduler(scheduler).run(programs)
    return _collect("sharded", fusion.value, results)


def forward_ep_baseline(
    xs: Sequence[Matrix],
    layers: Sequence[MoELayer],
    cluster: ClusterConfig,
    policy: CapacityPolicy = CapacityPolicy(),
    scheduler=None,
) -> tuple[list[Matrix], RunMetrics]:
    _validate_inputs(xs, layers, cluster)
    G = cluster.num_devices
    hosted = [[None] * len(layers) for _ in range(G)]
    for l, layer in enumerate(layers):
        owner = ep_placement(layer.num_experts, G)
        for g in range(G):
            hosted[g][l] = [layer.experts[e] for e in np.flatnonzero(owner == g)]
    programs = [_ep_program(g, xs[g], layers, hosted[g], cluster, policy) for g in range(G)]
    results = get_scheduler(scheduler).run(programs)
    return _collect("ep", "none", results)


# -- count-only traces ---------------------------------------------------------


def _routing_tables(n_tokens: Sequence[int], layer: MoELayer) -> np.ndarray:
    if not isinstance(layer.router, SkewedRouter):
        raise ConfigError("count-only traces need a skewed router; linear routing depends on token values")
    return np.array(
        [count_per_expert(layer.router.route_count(n, g).m_expert, layer.num_experts)
         for g, n in enumerate(n_tokens)],
        dtype=np.int64,
    )


def _metadata_counters(rec: DeviceLayerMetrics, E: int, G: int) -> None:
    c = rec.phases["metadata"]
    c.bytes_sent = c.bytes_received = (G - 1) * E * 8
    rec.bytes_sent_with_local += G * E * 8
    rec.bytes_received_with_local += G * E * 8


def trace_sharded(
    n_tokens: Sequence[int],
    layers: Sequence[MoELayer],
    cluster: ClusterConfig,
    fusion: FusionMode | str = FusionMode.GROUPED_GEMM,
) -> RunMetrics:
    """Counters of :func:`forward_sharded` derived from routing counts only.

    Every layer sees the same per-device token counts, so the routing of
    each layer depends only on its router stream.
    """
    fusion = FusionMode(fusion)
    G, bpe = cluster.num_devices, cluster.bytes_per_element
    if len(n_tokens) != G:
        raise ShapeError(f"{len(n_tokens)} token counts for {G} devices")
    n = np.asarray(n_tokens, dtype=np.int64)
    T = int(n.sum())
    out = []
    for layer in layers:
        E, h = layer.num_experts, layer.d_model
        width = make_shard_plan(layer.d_ff, G).width
        table = _routing_tables(n_tokens, layer)
        column = table.sum(axis=0)
        devices = []
        for g in range(G):
            rec = DeviceLayerMetrics()
            _metadata_counters(rec, E, G)
            others = T - int(n[g])
            sc, ga = rec.phases["scatter"], rec.phases["gather"]
            sc.bytes_sent = ga.bytes_received = (G - 1) * int(n[g]) * h * bpe
            sc.bytes_received = ga.bytes_sent = others * h * bpe
            rec.bytes_sent_with_local += (G * int(n[g]) + T) * h * bpe
            rec.bytes_received_with_local += (T + G * int(n[g])) * h * bpe
            comp = rec.phases["compute"]
            comp.flops = _ffn_flops(T, h, width)
            if fusion is FusionMode.PER_GPU_PER_EXPERT:
                comp.launches = int(np.count_nonzero(table))
            elif fusion is FusionMode.FUSED_PER_EXPERT:
                comp.launches = int(np.count_nonzero(column))
            elif T:
                comp.grouped_launches = 2
            rec.tokens_assigned = rec.tokens_processed = T
            rec.phases["aggregate"].flops = G * int(n[g]) * h
            devices.append(rec)
        out.append(LayerMetrics(devices, column))
    return RunMetrics("sharded", fusion.value, out)


def trace_ep(
    n_tokens: Sequence[int],
    layers: Sequence[MoELayer],
    cluster: ClusterConfig,
    policy: CapacityPolicy = CapacityPolicy(),
) -> RunMetrics:
    """Counters of :func:`forward_ep_baseline` derived from routing counts only."""
    G, bpe = cluster.num_devices, cluster.bytes_per_element
    if len(n_tokens) != G:
        raise ShapeError(f"{len(n_tokens)} token counts for {G} devices")
    n = np.asarray(n_tokens, dtype=np.int64)
    out = []
    for layer in layers:
        E, h = layer.num_experts, layer.d_model
        owner = ep_placement(E, G)
        table = _routing_tables(n_tokens, layer)
        capacity = policy.capacity(int(table.sum()), E)
        # rows[src, dst]: tokens of src bound for experts hosted on dst.
        rows = np.stack([table[:, owner == d].sum(axis=1) for d in range(G)], axis=1)
        devices = []
        for g in range(G):
            rec = DeviceLayerMetrics()
            _metadata_counters(rec, E, G)
            sc, ga = rec.phases["scatter"], rec.phases["gather"]
            sent_rows = int(rows[g].sum() - rows[g, g])
            recv_rows = int(rows[:, g].sum() - rows[g, g])
            sc.bytes_sent = ga.bytes_received = sent_rows * h * bpe
            sc.bytes_received = ga.bytes_sent = recv_rows * h * bpe
            rec.bytes_sent_with_local += (int(rows[g].sum()) + int(rows[:, g].sum())) * h * bpe
            rec.bytes_received_with_local += (int(rows[:, g].sum()) + int(rows[g].sum())) * h * bpe
            comp = rec.phases["compute"]
            for e in np.flatnonzero(owner == g):
                assigned = int(table[:, e].sum())
                admitted = min(assigned, capacity)
                if admitted:
                    comp.launches += 1
                    comp.flops += _ffn_flops(admitted, h, layer.d_ff)
                rec.tokens_assigned += assigned
                rec.tokens_processed += admitted
                rec.drops += assigned - admitted
            rec.phases["aggregate"].flops = int(n[g]) * h
            devices.append(rec)
        out.append(LayerMetrics(devices, table.sum(axis=0)))
    return RunMetrics("ep", "none", out)
