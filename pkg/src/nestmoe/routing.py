"""Top-k gating at image and token level, plus routing statistics.

Selection is deterministic: probabilities tie-break toward the lower
expert index. The shared expert never passes through a gate; only routed
(non-shared) experts are scored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ConfigError, DataError


@dataclass
class GateParams:
    """Linear scoring layer: scores = pooled @ weight.T + bias."""

    weight: np.ndarray  # (n_experts, c_in)
    bias: np.ndarray  # (n_experts,)

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]


def init_gate_params(rng: np.random.Generator, n_experts: int, c_in: int) -> GateParams:
    u = 1.0 / np.sqrt(c_in)
    return GateParams(
        weight=rng.uniform(-u, u, size=(n_experts, c_in)), bias=np.zeros(n_experts)
    )


@dataclass(frozen=True)
class RoutingDecision:
    """One gating outcome: selected expert indices (ascending), their
    renormalized weights, and the full pre-selection distribution."""

    selected: tuple[int, ...]
    weights: np.ndarray
    full_probs: np.ndarray


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, ascending.

    Stable argsort on the negated values makes ties fall to the lower
    index.
    """
    if k < 1 or k > probs.shape[-1]:
        raise ConfigError(f"top-k with k={k} out of range for {probs.shape[-1]} experts")
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def decide(probs: np.ndarray, k: int) -> RoutingDecision:
    """Build a RoutingDecision from one probability row."""
    sel = top_k_indices(probs, k)
    chosen = probs[sel]
    weights = chosen / chosen.sum()
    return RoutingDecision(tuple(int(i) for i in sel), weights, probs)


def gate_probs(pooled: np.ndarray, params: GateParams) -> np.ndarray:
    """Rows of routing probabilities for pooled feature rows."""
    scores = pooled @ params.weight.T + params.bias
    return K.softmax(scores, axis=-1)


def image_gate(x: np.ndarray, params: GateParams, k: int) -> list[RoutingDecision]:
    """Pool (B, C, H, W) globally, score, softmax, take top-k, renormalize."""
    probs = gate_probs(K.global_avg_pool(x), params)
    return [decide(row, k) for row in probs]


def token_gate(tokens: np.ndarray, params: GateParams, k: int) -> list[RoutingDecision]:
    """Independent decision per token row of (B, N, C); row-major order."""
    probs = gate_probs(tokens.reshape(-1, tokens.shape[-1]), params)
    return [decide(row, k) for row in probs]


@dataclass
class LoadBalanceStats:
    """Per-expert routing aggregates over a set of decisions.

    mean_probs averages the full softmax distribution (pre top-k); counts
    and assign_frac reflect actual top-k assignments. sum(counts) == k * total.
    """

    mean_probs: np.ndarray
    assign_frac: np.ndarray
    counts: np.ndarray
    total: int

    @property
    def n_experts(self) -> int:
        return self.counts.shape[0]

    @classmethod
    def from_arrays(cls, prob_sum: np.ndarray, counts: np.ndarray, total: int) -> "LoadBalanceStats":
        return cls(
            mean_probs=prob_sum / total,
            assign_frac=counts / counts.sum(),
            counts=counts,
            total=total,
        )

    def merge(self, other: "LoadBalanceStats") -> "LoadBalanceStats":
        """Combine partial stats (elementwise sums of counts and prob sums)."""
        return LoadBalanceStats.from_arrays(
            self.mean_probs * self.total + other.mean_probs * other.total,
            self.counts + other.counts,
            self.total + other.total,
        )


def accumulate_stats(decisions: list[RoutingDecision]) -> LoadBalanceStats:
    if not decisions:
        raise DataError("accumulate_stats needs at least one routing decision")
    n = decisions[0].full_probs.shape[0]
    prob_sum = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    for d in decisions:
        prob_sum += d.full_probs
        for i in d.selected:
            counts[i] += 1
    return LoadBalanceStats.from_arrays(prob_sum, counts, len(decisions))


def stats_from_probs(probs: np.ndarray, k: int) -> LoadBalanceStats:
    """Vectorized accumulate_stats over rows of full probabilities."""
    flat = probs.reshape(-1, probs.shape[-1])
    if flat.shape[0] == 0:
        raise DataError("stats_from_probs received an empty batch")
    sel = top_k_indices(flat, k)
    counts = np.zeros(flat.shape[-1], dtype=np.int64)
    np.add.at(counts, sel.reshape(-1), 1)
    return LoadBalanceStats.from_arrays(flat.sum(axis=0), counts, flat.shape[0])


def selection_masks(probs: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask of shape probs.shape marking the top-k entries per row."""
    sel = top_k_indices(probs, k)
    mask = np.zeros_like(probs)
    np.put_along_axis(mask, sel, 1.0, axis=-1)
    return mask
