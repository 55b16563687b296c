"""Adam with bias correction, global-norm gradient clipping, and the
linear-warmup / cosine-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class OptimState:
    """Per-parameter first/second moments keyed by parameter name.

    Single-owner: adam_step mutates moments and the step counter in place.
    """

    hyper: AdamConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, named: dict[str, np.ndarray], hyper: AdamConfig = AdamConfig()) -> "OptimState":
        return cls(
            hyper=hyper,
            m={k: np.zeros_like(a) for k, a in named.items()},
            v={k: np.zeros_like(a) for k, a in named.items()},
        )


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    sq = sum(float(np.sum(g * g)) for g in grads.values())
    norm = float(np.sqrt(sq))
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float | None = None,
) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update; returns new parameter arrays.

    m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
    p <- p - lr (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
    """
    h = state.hyper
    step_lr = h.lr if lr is None else lr
    state.t += 1
    bc1 = 1.0 - h.beta1**state.t
    bc2 = 1.0 - h.beta2**state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name] = h.beta1 * state.m[name] + (1 - h.beta1) * g
        v = state.v[name] = h.beta2 * state.v[name] + (1 - h.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + h.eps)
        if h.weight_decay:
            update = update + h.weight_decay * p
        out[name] = p - step_lr * update
    return out


@dataclass(frozen=True)
class Schedule:
    """Linear ramp over the warmup epochs, then cosine decay to zero."""

    base_lr: float
    warmup_epochs: int
    total_epochs: int

    def __post_init__(self):
        if self.total_epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("schedule epochs must be >= 0")
        if self.warmup_epochs > self.total_epochs:
            raise ConfigError(
                f"warmup {self.warmup_epochs} exceeds total {self.total_epochs}"
            )


def lr_at(sched: Schedule, epoch: int) -> float:
    if epoch < 0 or epoch > sched.total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    if epoch < sched.warmup_epochs:
        return sched.base_lr * (epoch + 1) / sched.warmup_epochs
    span = sched.total_epochs - sched.warmup_epochs
    if span == 0:
        return sched.base_lr
    phase = (epoch - sched.warmup_epochs) / span
    return sched.base_lr * 0.5 * (1.0 + np.cos(np.pi * phase))
