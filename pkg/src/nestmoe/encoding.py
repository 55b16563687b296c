"""Frame <-> latent-token mappings: patch extraction, embedding with a
learnable positional table, temporal aggregation of the history window,
and the linear head that turns a latent grid back into one frame.

All maps here run on the autodiff tape, so the whole encoder + head
composition is differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class PatchConfig:
    patch_h: int
    patch_w: int
    embed_dim: int
    grid_h: int
    grid_w: int

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @classmethod
    def for_field(cls, height: int, width: int, patch: int, embed_dim: int) -> "PatchConfig":
        if height % patch or width % patch:
            raise ConfigError(
                f"patch size {patch} must divide the {height}x{width} field"
            )
        return cls(patch, patch, embed_dim, height // patch, width // patch)


@dataclass
class EncoderParams:
    """Learnable encoder + head tensors.

    patch_proj: (C*P_H*P_W, D); pos_embed: (N, D) shared across the batch;
    temporal: (T, D, D) per-history-step channel maps; head projects each
    latent position back to one patch of pixels.
    """

    patch_proj: np.ndarray
    patch_bias: np.ndarray
    pos_embed: np.ndarray
    temporal: np.ndarray
    head_proj: np.ndarray
    head_bias: np.ndarray


def init_encoder_params(
    rng: np.random.Generator, channels: int, history: int, cfg: PatchConfig
) -> EncoderParams:
    """Uniform(+-1/sqrt(fan_in)) projections, N(0, 0.02) positional table,
    zero biases, and a zero head so the untrained model predicts the zero
    field."""
    d = cfg.embed_dim
    ppx = channels * cfg.patch_h * cfg.patch_w
    u = 1.0 / np.sqrt(ppx)
    ut = 1.0 / np.sqrt(d)
    return EncoderParams(
        patch_proj=rng.uniform(-u, u, size=(ppx, d)),
        patch_bias=np.zeros(d),
        pos_embed=rng.normal(0.0, 0.02, size=(cfg.n_patches, d)),
        temporal=rng.uniform(-ut, ut, size=(history, d, d)),
        head_proj=np.zeros((d, ppx)),
        head_bias=np.zeros(ppx),
    )


def patchify(x: Var, cfg: PatchConfig) -> Var:
    """(B, C, H, W) -> (B, N, C*P_H*P_W), patches row-major over the lattice.

    Pure reshape/transpose composition, hence exactly invertible.
    """
    b, c, h, w = x.shape
    if h != cfg.grid_h * cfg.patch_h or w != cfg.grid_w * cfg.patch_w:
        raise ShapeError(
            f"field {x.shape} does not match patch grid "
            f"{cfg.grid_h}x{cfg.grid_w} of {cfg.patch_h}x{cfg.patch_w} patches"
        )
    t = ad.reshape(x, (b, c, cfg.grid_h, cfg.patch_h, cfg.grid_w, cfg.patch_w))
    t = ad.transpose(t, (0, 2, 4, 1, 3, 5))  # (B, gh, gw, C, P_H, P_W)
    return ad.reshape(t, (b, cfg.n_patches, c * cfg.patch_h * cfg.patch_w))


def unpatchify(p: Var, cfg: PatchConfig, channels: int) -> Var:
    """Inverse of patchify: (B, N, C*P_H*P_W) -> (B, C, H, W)."""
    b = p.shape[0]
    t = ad.reshape(p, (b, cfg.grid_h, cfg.grid_w, channels, cfg.patch_h, cfg.patch_w))
    t = ad.transpose(t, (0, 3, 1, 4, 2, 5))
    return ad.reshape(
        t, (b, channels, cfg.grid_h * cfg.patch_h, cfg.grid_w * cfg.patch_w)
    )


def embed(patches: Var, proj, bias, pos) -> Var:
    """X = patches @ proj + bias + pos, positional table broadcast over batch."""
    return ad.add(ad.affine(patches, proj, bias), ad.as_var(patches.tape, pos))


def encode_frame(x: Var, params, cfg: PatchConfig) -> Var:
    """One frame (B, C, H, W) -> latent grid (B, grid_h, grid_w, D)."""
    tokens = embed(patchify(x, cfg), params.patch_proj, params.patch_bias, params.pos_embed)
    b = tokens.shape[0]
    return ad.reshape(tokens, (b, cfg.grid_h, cfg.grid_w, cfg.embed_dim))


def temporal_aggregate(frames: list[Var], weights: list[Var]) -> Var:
    """Y = sum_t X_t @ W_t over the history window.

    Each frame is a latent grid (B, gh, gw, D); each W_t is (D, D) applied
    to the channel vector at every position.
    """
    if len(frames) != len(weights):
        raise ConfigError(
            f"history length mismatch: {len(frames)} frames vs {len(weights)} weight slices"
        )
    if not frames:
        raise ConfigError("temporal_aggregate needs at least one frame")
    out = ad.matmul(frames[0], weights[0])
    for xt, wt in zip(frames[1:], weights[1:]):
        out = ad.add(out, ad.matmul(xt, wt))
    return out


def decode_head(latent: Var, proj, bias, cfg: PatchConfig, channels: int) -> Var:
    """Latent grid (B, gh, gw, D) -> next frame (B, C, H, W)."""
    b = latent.shape[0]
    tokens = ad.reshape(latent, (b, cfg.n_patches, cfg.embed_dim))
    pixels = ad.affine(tokens, proj, bias)
    return unpatchify(pixels, cfg, channels)


# numpy conveniences for tests and non-training callers -----------------


def _run(fn, *arrays):
    tape = ad.Tape()
    return fn(*[tape.leaf(a) for a in arrays]).value


def patchify_np(x: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    return _run(lambda v: patchify(v, cfg), x)


def unpatchify_np(p: np.ndarray, cfg: PatchConfig, channels: int) -> np.ndarray:
    return _run(lambda v: unpatchify(v, cfg, channels), p)


def _register_grad_case() -> None:
    def build(rng):
        cfg = PatchConfig.for_field(8, 8, 4, 6)
        c, t = 1, 2
        enc = init_encoder_params(rng, c, t, cfg)
        frames = [rng.normal(size=(2, c, 8, 8)) for _ in range(t)]
        inputs = frames + [
            enc.patch_proj,
            enc.patch_bias,
            enc.pos_embed,
            rng.normal(size=(t, 6, 6)),
            rng.normal(size=(6, c * 16)),
            rng.normal(size=(c * 16,)),
        ]
        pseed = int(rng.integers(2**31))

        def fn(f0, f1, proj, bias, pos, temporal, head_w, head_b):
            lat = []
            for f in (f0, f1):
                tokens = embed(patchify(f, cfg), proj, bias, pos)
                lat.append(ad.reshape(tokens, (2, cfg.grid_h, cfg.grid_w, 6)))
            wts = [ad.take_last(ad.transpose(temporal, (1, 2, 0)), i) for i in range(t)]
            agg = temporal_aggregate(lat, wts)
            pred = decode_head(agg, head_w, head_b, cfg, c)
            probe = np.random.default_rng(pseed).normal(size=pred.shape)
            return ad.sum_(ad.mul(pred, pred.tape.constant(probe)))

        return inputs, fn

    ad.register_case(ad.CheckCase("encoder_head", build))


_register_grad_case()
