"""Training objectives: the relative-L2 task loss, the expert load-balance
penalty, and their weighted composition.

Each loss has a plain numpy form (reports, tests) and a tape form used in
training. The balance loss differentiates through the mean routing
probabilities only; assignment fractions are constants, as is standard for
this penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigError, DataError, NumericError
from .routing import LoadBalanceStats

L2RE_EPS = 1e-10


@dataclass(frozen=True)
class LossConfig:
    """Weights on the image-level (alpha) and token-level (beta) balance
    losses."""

    alpha: float = 0.01
    beta: float = 0.01

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(
                f"balance-loss weights must be >= 0, got alpha={self.alpha} beta={self.beta}"
            )


def load_balance_loss(stats: LoadBalanceStats) -> float:
    """E * sum_i p_i f_i; equals 1 at perfect uniformity, E at collapse."""
    if stats.total <= 0:
        raise DataError("load_balance_loss over an empty batch")
    e = stats.n_experts
    return float(e * np.dot(stats.mean_probs, stats.assign_frac))


def load_balance_loss_var(mean_probs: Var, assign_frac: np.ndarray) -> Var:
    """Tape form: mean_probs differentiable, assignment fractions constant."""
    e = mean_probs.shape[-1]
    t = mean_probs.tape
    return ad.mul(
        ad.sum_(ad.mul(mean_probs, t.constant(assign_frac))),
        t.constant(np.array(float(e))),
    )


@dataclass(frozen=True)
class L2reResult:
    value: float
    # channels whose truth norm fell below the epsilon guard, as (b, c) pairs
    guarded: tuple[tuple[int, int], ...] = ()


def l2re(pred: np.ndarray, truth: np.ndarray) -> L2reResult:
    """Mean over batch and channels of ||pred - truth||_2 / ||truth||_2,
    norms over the spatial plane. Zero-norm truth channels are guarded by
    an epsilon denominator and flagged in the diagnostics."""
    if pred.shape != truth.shape:
        raise ConfigError(f"l2re shapes differ: {pred.shape} vs {truth.shape}")
    diff = np.sqrt(np.sum((pred - truth) ** 2, axis=(-2, -1)))
    norm = np.sqrt(np.sum(truth**2, axis=(-2, -1)))
    guarded = np.argwhere(norm < L2RE_EPS)
    value = float(np.mean(diff / np.maximum(norm, L2RE_EPS)))
    return L2reResult(value, tuple((int(b), int(c)) for b, c in guarded))


def l2re_var(pred: Var, truth: np.ndarray) -> Var:
    """Tape form of the relative error; the truth norms are constants."""
    b, c = truth.shape[0], truth.shape[1]
    norm = np.sqrt(np.sum(truth**2, axis=(-2, -1)))
    inv = 1.0 / np.maximum(norm, L2RE_EPS)
    t = pred.tape
    diff = ad.sub(pred, t.constant(truth))
    sq = ad.sum_(ad.mul(diff, diff), axis=(2, 3))
    per_channel = ad.mul(ad.sqrt(sq), t.constant(inv))
    return ad.mean(ad.reshape(per_channel, (b * c,)), axis=0)


def total_loss(l2: float, aux_image: float, aux_token: float, cfg: LossConfig) -> float:
    """L = L2 + alpha * aux_image + beta * aux_token."""
    out = l2 + cfg.alpha * aux_image + cfg.beta * aux_token
    if not np.isfinite(out):
        raise NumericError(
            f"total loss is not finite: l2={l2} aux_image={aux_image} aux_token={aux_token}"
        )
    return float(out)


def total_loss_var(l2: Var, aux_image: Var | None, aux_token: Var | None, cfg: LossConfig) -> Var:
    t = l2.tape
    out = l2
    if aux_image is not None:
        out = ad.add(out, ad.mul(aux_image, t.constant(np.array(cfg.alpha))))
    if aux_token is not None:
        out = ad.add(out, ad.mul(aux_token, t.constant(np.array(cfg.beta))))
    if not np.isfinite(out.value):
        raise NumericError("total loss is not finite")
    return out
