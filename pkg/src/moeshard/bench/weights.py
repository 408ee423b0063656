"""Seeded weight generation and the little-endian ``MOEW`` weight file.

Layout::

    b"MOEW" | u32 version=1 | u32 h | u32 d_ff | u32 num_experts | u32 num_layers
    per layer: gate (h x E f32), then per expert W_i (h x d_ff f32), W_o (d_ff x h f32)

All matrices are row-major float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..expert import ExpertParams
from ..rng import SplitMix64, derive_seed
from ..tensor import DTYPE

MAGIC = b"MOEW"
VERSION = 1
_HEADER = struct.Struct("<4s5I")

# Stream tags for derive_seed.
GATE_STREAM = 1
EXPERT_STREAM = 2
TOKEN_STREAM = 3
SKEW_STREAM = 4


@dataclass(frozen=True)
class LayerWeights:
    gate: np.ndarray
    experts: tuple[ExpertParams, ...]


@dataclass(frozen=True)
class WeightFile:
    h: int
    d_ff: int
    num_experts: int
    layers: tuple[LayerWeights, ...]

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def _normal(seed: int, rows: int, cols: int, fan_in: int) -> np.ndarray:
    v = SplitMix64(seed).normal(rows * cols) / np.sqrt(fan_in)
    return v.reshape(rows, cols).astype(DTYPE)


def generate_weights(h: int, d_ff: int, num_experts: int, num_layers: int, seed: int) -> WeightFile:
    layers = []
    for l in range(num_layers):
        gate = _normal(derive_seed(seed, GATE_STREAM, l), h, num_experts, h)
        experts = tuple(
            ExpertParams(
                e,
                _normal(derive_seed(seed, EXPERT_STREAM, l, e, 0), h, d_ff, h),
                _normal(derive_seed(seed, EXPERT_STREAM, l, e, 1), d_ff, h, d_ff),
            )
            for e in range(num_experts)
        )
        layers.append(LayerWeights(gate, experts))
    return WeightFile(h, d_ff, num_experts, tuple(layers))


def generate_tokens(n_tokens: int, h: int, seed: int, rank: int) -> np.ndarray:
    """Standard-normal post-attention tokens for one device."""
    v = SplitMix64(derive_seed(seed, TOKEN_STREAM, rank)).normal(n_tokens * h)
    return v.reshape(n_tokens, h).astype(DTYPE)


def encode_weights(w: WeightFile) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, w.h, w.d_ff, w.num_experts, w.num_layers)]
    for layer in w.layers:
        parts.append(layer.gate.astype("<f4").tobytes())
        for e in layer.experts:
            parts.append(e.W_i.astype("<f4").tobytes())
            parts.append(e.W_o.astype("<f4").tobytes())
    return b"".join(parts)


def save_weights(w: WeightFile, path: str | Path) -> None:
    Path(path).write_bytes(encode_weights(w))


def decode_weights(data: bytes) -> WeightFile:
    if len(data) < _HEADER.size:
        raise FormatError(f"file is {len(data)} bytes, shorter than the {_HEADER.size}-byte header", len(data))
    magic, version, h, d_ff, E, L = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if min(h, d_ff, E, L) == 0:
        raise FormatError(f"zero dimension in header (h={h}, d_ff={d_ff}, E={E}, L={L})", 8)
    per_layer = 4 * (h * E + E * 2 * h * d_ff)
    expected = _HEADER.size + L * per_layer
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "trailing bytes"
        raise FormatError(
            f"{kind}: header dims imply {expected} bytes, file has {len(data)}",
            min(len(data), expected),
        )
    offset = _HEADER.size

    def take(rows: int, cols: int) -> np.ndarray:
        nonlocal offset
        m = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset)
        offset += 4 * rows * cols
        return m.reshape(rows, cols).astype(DTYPE)

    layers = []
    for _ in range(L):
        gate = take(h, E)
        experts = tuple(ExpertParams(e, take(h, d_ff), take(d_ff, h)) for e in range(E))
        layers.append(LayerWeights(gate, experts))
    return WeightFile(h, d_ff, E, tuple(layers))


def load_weights(path: str | Path) -> WeightFile:
    return decode_weights(Path(path).read_bytes())
