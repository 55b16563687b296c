"""Numerical kernels on raw float64 ndarrays.

Single source of truth for the forward math: the typed wrappers in
``tensor`` and the differentiable ops in ``autodiff`` both call these.
Everything is pure, 64-bit, and deterministic.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

# tanh-form GELU constant sqrt(2/pi)
_GELU_C = 0.7978845608028654


def as_f64(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape checking.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared across
    the batch) or has leading axes identical to ``a``'s.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``. Rejects NaN input."""
    if np.any(np.isnan(v)):
        raise NumericError("softmax received NaN input")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    # Subgradient 1 at the kink so a path initialized exactly at zero
    # pre-activation still receives gradient signal.
    return np.where(x >= 0.0, 1.0, 0.0)


def gelu_with_tanh(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-approximation GELU, returning (value, tanh term) so the
    backward pass can reuse the transcendental."""
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu(x: np.ndarray) -> np.ndarray:
    """0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    return gelu_with_tanh(x)[0]


def gelu_grad_from_tanh(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return gelu_grad_from_tanh(x, np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Normalize the last axis to zero mean / unit variance, then affine.

    Returns (y, xhat, inv_std); the extra terms feed the backward pass.
    """
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm affine params {gamma.shape}/{beta.shape} do not match axis length {n}"
        )
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, xhat, inv_std


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C) mean over the spatial plane."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D field, got {x.shape}")
    return np.mean(x, axis=(2, 3))


def _check_pow2_axes(shape, axes) -> None:
    for ax in axes:
        n = shape[ax]
        if n < 1 or (n & (n - 1)) != 0:
            raise ConfigError(
                f"fft2 supports power-of-two transform sizes only, got {n} along axis {ax} of {tuple(shape)}"
            )


def fft2(x: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Unnormalized 2-D DFT over ``axes``. Sizes must be powers of two."""
    _check_pow2_axes(x.shape, axes)
    return np.fft.fft2(x, axes=axes)


def ifft2(z: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Inverse transform with the 1/(H*W) factor. Returns the full complex array."""
    _check_pow2_axes(z.shape, axes)
    return np.fft.ifft2(z, axes=axes)


def attention_core(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact scaled dot-product attention.

    q, k, v: (..., N, d). Softmax over keys with max subtraction.
    """
    d = q.shape[-1]
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(d)
    probs = softmax(scores, axis=-1)
    return np.matmul(probs, v)


def attention_core_tiled(q: np.ndarray, k: np.ndarray, v: np.ndarray, tile: int) -> np.ndarray:
    """Streaming-softmax attention over key/value blocks of size ``tile``.

    Maintains a running row max and denominator so no exponential ever sees
    an argument above zero; mathematically identical to attention_core.
    """
    if tile < 1:
        raise ConfigError(f"tile size must be >= 1, got {tile}")
    d = q.shape[-1]
    n_keys = k.shape[-2]
    scale = 1.0 / np.sqrt(d)

    m = np.full(q.shape[:-1], -np.inf)          # running max per query row
    denom = np.zeros(q.shape[:-1])              # running softmax denominator
    acc = np.zeros(q.shape[:-1] + (v.shape[-1],))

    for start in range(0, n_keys, tile):
        kb = k[..., start : start + tile, :]
        vb = v[..., start : start + tile, :]
        s = np.matmul(q, np.swapaxes(kb, -1, -2)) * scale
        block_max = np.max(s, axis=-1)
        new_m = np.maximum(m, block_max)
        # rescale history; exp(-inf - finite) underflows cleanly to 0
        correction = np.exp(m - new_m)
        p = np.exp(s - new_m[..., None])
        denom = denom * correction + np.sum(p, axis=-1)
        acc = acc * correction[..., None] + np.matmul(p, vb)
        m = new_m
    return acc / denom[..., None]
