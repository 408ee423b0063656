"""Top-1 routers: a linear softmax gate and the synthetic skewed router."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, ConfigError, ShapeError
from .rng import SplitMix64, derive_seed
from .tensor import DTYPE, Matrix, matmul


@dataclass(frozen=True)
class RoutingAssignment:
    """Per-token expert index plus the factor applied to the expert output."""

    m_expert: np.ndarray
    gate_scale: np.ndarray

    def __post_init__(self):
        if self.m_expert.shape != self.gate_scale.shape or self.m_expert.ndim != 1:
            raise ShapeError(
                f"m_expert {self.m_expert.shape} and gate_scale "
                f"{self.gate_scale.shape} must be equal-length vectors"
            )

    def __len__(self) -> int:
        return len(self.m_expert)


@dataclass(frozen=True)
class LinearRouterParams:
    gate: Matrix
    seed: int | None = None

    @property
    def num_experts(self) -> int:
        return self.gate.shape[1]

    @classmethod
    def from_seed(cls, h: int, num_experts: int, seed: int) -> LinearRouterParams:
        """Standard-normal gate scaled by ``1/sqrt(h)``."""
        g = SplitMix64(seed).normal(h * num_experts) / np.sqrt(h)
        return cls(gate=g.reshape(h, num_experts).astype(DTYPE), seed=seed)


@dataclass(frozen=True)
class SkewedRouterParams:
    alpha_r: float
    k_r: int
    seed: int = 0

    def __post_init__(self):
        if self.alpha_r < 0:
            raise ConfigError(f"alpha_r must be nonnegative, got {self.alpha_r}")
        if self.k_r < 0:
            raise ConfigError(f"k_r must be nonnegative, got {self.k_r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def route_linear(x: Matrix, params: LinearRouterParams) -> RoutingAssignment:
    if x.ndim != 2 or x.shape[1] != params.gate.shape[0]:
        raise ShapeError(f"tokens {x.shape} do not match gate {params.gate.shape}")
    if x.shape[0] == 0:
        return RoutingAssignment(np.zeros(0, np.int64), np.zeros(0, x.dtype))
    probs = softmax(matmul(x, params.gate.astype(x.dtype, copy=False)))
    # np.argmax returns the first maximum, i.e. the lowest expert index on ties.
    m_expert = probs.argmax(axis=1).astype(np.int64)
    scale = probs[np.arange(len(m_expert)), m_expert]
    return RoutingAssignment(m_expert, scale.astype(x.dtype))


def skew_probabilities(num_experts: int, params: SkewedRouterParams) -> np.ndarray:
    """Normalised selection probabilities; the first ``k_r`` experts get ``+alpha_r``."""
    if num_experts < 1:
        raise ConfigError("need at least one expert")
    if params.k_r > num_experts:
        raise ConfigError(f"k_r={params.k_r} exceeds the {num_experts} experts")
    w = np.full(num_experts, 1.0 / num_experts)
    w[: params.k_r] += params.alpha_r
    return w / w.sum()


def route_skewed(n_tokens: int, num_experts: int, params: SkewedRouterParams) -> RoutingAssignment:
    p = skew_probabilities(num_experts, params)
    m_expert = SplitMix64(params.seed).categorical(p, n_tokens)
    return RoutingAssignment(m_expert, np.ones(n_tokens, dtype=DTYPE))


@dataclass(frozen=True)
class LinearRouter:
    params: LinearRouterParams
    kind: str = field(default="linear", init=False)

    @property
    def num_experts(self) -> int:
        return self.params.num_experts

    def route(self, x: Matrix, rank: int = 0) -> RoutingAssignment:
        return route_linear(x, self.params)


@dataclass(frozen=True)
class SkewedRouter:
    """Skewed router bound to an expert count.

    Each device rank draws from its own stream, derived from the router seed,
    so the assignment depends only on ``(seed, rank, n_tokens)``.
    """

    num_experts: int
    params: SkewedRouterParams
    kind: str = field(default="skewed", init=False)

    def __post_init__(self):
        skew_probabilities(self.num_experts, self.params)

    def stream(self, rank: int) -> SkewedRouterParams:
        p = self.params
        return SkewedRouterParams(p.alpha_r, p.k_r, derive_seed(p.seed, rank))

    def route_count(self, n_tokens: int, rank: int = 0) -> RoutingAssignment:
        return route_skewed(n_tokens, self.num_experts, self.stream(rank))

    def route(self, x: Matrix, rank: int = 0) -> RoutingAssignment:
        a = self.route_count(x.shape[0], rank)
        return RoutingAssignment(a.m_expert, a.gate_scale.astype(x.dtype))


Router = LinearRouter | SkewedRouter


def check_assignment(a: RoutingAssignment, n_tokens: int, num_experts: int) -> None:
    if len(a) != n_tokens:
        raise ShapeError(f"{len(a)} routing entries for {n_tokens} tokens")
    if n_tokens and (a.m_expert.min() < 0 or a.m_expert.max() >= num_experts):
        raise BoundsError(f"expert index outside [0, {num_experts})")
