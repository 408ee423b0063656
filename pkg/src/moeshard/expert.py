"""Expert parameters, column/row shard plans and per-shard computation.

An expert is the pair ``(W_i, W_o)`` with ``W_i: [d_model, d_ff]`` and
``W_o: [d_ff, d_model]``; its output is ``relu(x @ W_i) @ W_o``. Shard ``g``
keeps a contiguous block of ``d_ff`` columns of ``W_i`` and the same rows of
``W_o``. Because ReLU acts element-wise on the intermediate, shard ``g`` can
finish both products alone, and the sum of all partial outputs equals the
dense output.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, DivisibilityError, ShapeError
from .tensor import Matrix, concat_rows, matmul, relu, scale_rows, slice_cols, slice_rows


@dataclass(frozen=True)
class ExpertParams:
    expert_id: int
    W_i: Matrix
    W_o: Matrix

    def __post_init__(self):
        d_model, d_ff = self.W_i.shape
        if self.W_o.shape != (d_ff, d_model):
            raise ShapeError(f"W_i {self.W_i.shape} and W_o {self.W_o.shape} do not pair up")

    @property
    def d_model(self) -> int:
        return self.W_i.shape[0]

    @property
    def d_ff(self) -> int:
        return self.W_i.shape[1]


@dataclass(frozen=True)
class ShardPlan:
    num_shards: int
    d_ff: int

    @property
    def width(self) -> int:
        return self.d_ff // self.num_shards

    def range(self, g: int) -> tuple[int, int]:
        if not 0 <= g < self.num_shards:
            raise BoundsError(f"shard rank {g} outside [0, {self.num_shards})")
        return g * self.width, (g + 1) * self.width

    @property
    def ranges(self) -> list[tuple[int, int]]:
        return [self.range(g) for g in range(self.num_shards)]


@dataclass(frozen=True)
class ExpertShard:
    expert_id: int
    shard_rank: int
    W_i_g: Matrix
    W_o_g: Matrix


def make_shard_plan(d_ff: int, num_shards: int) -> ShardPlan:
    if num_shards < 1:
        raise DivisibilityError(f"num_shards must be >= 1, got {num_shards}")
    if d_ff % num_shards:
        raise DivisibilityError(
            f"d_ff={d_ff} is not divisible by {num_shards} shards"
        )
    return ShardPlan(num_shards, d_ff)


def extract_shard(e: ExpertParams, plan: ShardPlan, g: int) -> ExpertShard:
    if e.d_ff != plan.d_ff:
        raise ShapeError(f"expert d_ff={e.d_ff} but plan d_ff={plan.d_ff}")
    lo, hi = plan.range(g)
    return ExpertShard(e.expert_id, g, slice_cols(e.W_i, lo, hi), slice_rows(e.W_o, lo, hi))


def assemble_expert(shards: list[ExpertShard]) -> ExpertParams:
    """Inverse of ``extract_shard`` over all ranks."""
    shards = sorted(shards, key=lambda s: s.shard_rank)
    W_i = concat_rows([s.W_i_g.T for s in shards]).T.copy()
    W_o = concat_rows([s.W_o_g for s in shards])
    return ExpertParams(shards[0].expert_id, W_i, W_o)


def _ffn(x: Matrix, W_i: Matrix, W_o: Matrix, scale) -> Matrix:
    if x.ndim != 2 or x.shape[1] != W_i.shape[0]:
        raise ShapeError(f"tokens {x.shape} do not match W_i {W_i.shape}")
    dtype = x.dtype
    y = matmul(relu(matmul(x, W_i.astype(dtype, copy=False))), W_o.astype(dtype, copy=False))
    if scale is None:
        return y
    return scale_rows(y, np.asarray(scale))


def expert_forward_dense(x: Matrix, e: ExpertParams, scale=None) -> Matrix:
    return _ffn(x, e.W_i, e.W_o, scale)


def expert_forward_partial(x: Matrix, s: ExpertShard, scale=None) -> Matrix:
    """Partial output ``scale * relu(x @ W_i_g) @ W_o_g``, shape ``[n, d_model]``."""
    return _ffn(x, s.W_i_g, s.W_o_g, scale)


def expert_macs(n_tokens: int, d_model: int, d_ff_slice: int) -> int:
    """Multiply-accumulates of both products for ``n_tokens`` rows."""
    return 2 * n_tokens * d_model * d_ff_slice


class Split(enum.Enum):
    COLUMN_WISE_WI = "column_wise_Wi"
    ROW_WISE_WI = "row_wise_Wi"


def transfer_entries(c: int, h: int, num_shards: int, split: Split | str) -> int:
    """Token-matrix entries each device sends in the first exchange.

    A column split of ``W_i`` needs every device to see all ``c`` rows:
    ``c*h*(G-1)``. A row split only ships each peer its own slice of the
    hidden dimension: ``c*h*(G-1)/G``.
    """
    split = Split(split)
    if num_shards < 1:
        raise DivisibilityError(f"num_shards must be >= 1, got {num_shards}")
    total = c * h * (num_shards - 1)
    if split is Split.COLUMN_WISE_WI:
        return total
    # A row split of W_i partitions its d_model rows, so h must divide evenly.
    if h % num_shards:
        raise DivisibilityError(f"h={h} is not divisible by G={num_shards}")
    return total // num_shards


def shard_storage_entries(d_model: int, d_ff: int, num_shards: int) -> tuple[int, int]:
    """Entries of ``W_i`` and ``W_o`` stored by one shard."""
    plan = make_shard_plan(d_ff, num_shards)
    return d_model * plan.width, plan.width * d_model
