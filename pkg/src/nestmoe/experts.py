"""The three expert architectures of the nested mixture.

* spectral block (shared, image level): FFT over the token grid, a learned
  complex channel mix applied at every frequency bin, inverse FFT, then a
  pre-norm MLP; both stages carry residual connections.
* attention block (routed, image level): pre-norm multi-head exact
  attention, then a token-level sub-mixture replacing the usual FFN.
* two-layer GELU MLP (the token-level expert).

Blocks are written so that zero-initialized final projections make each
block the exact identity map; the layer combiner in ``model`` relies on
that for an identity-at-initialization network.

Parameter dataclass fields may hold plain ndarrays (forward only) or tape
Vars (training); every use goes through ``_v`` which wraps ndarrays as
tape constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels as K
from . import routing
from . import tensor as tensor_mod
from .autodiff import Var
from .errors import ConfigError, ShapeError
from .routing import GateParams, LoadBalanceStats

LN_EPS = 1e-5


@dataclass
class MlpExpertParams:
    """y = W2 gelu(W1 x + b1) + b2 with hidden width ratio * C."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ratio: int = 1


@dataclass
class SubMoeParams:
    gate: GateParams
    routed: list[MlpExpertParams]
    shared: list[MlpExpertParams]
    k: int


@dataclass
class AfnoExpertParams:
    """Complex channel mix (one (C, C) pair shared by all frequency bins)
    plus the post-spectral norm/MLP stage."""

    w1_r: np.ndarray
    w1_i: np.ndarray
    b1_r: np.ndarray
    b1_i: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    mlp: MlpExpertParams


@dataclass
class AttentionExpertParams:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    heads: int
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    sub_moe: SubMoeParams


_v = ad.as_var


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------


def init_mlp(rng: np.random.Generator, c: int, ratio: int) -> MlpExpertParams:
    hidden = ratio * c
    u = 1.0 / np.sqrt(c)
    return MlpExpertParams(
        w1=rng.uniform(-u, u, size=(c, hidden)),
        b1=np.zeros(hidden),
        w2=np.zeros((hidden, c)),  # zero final projection: block starts silent
        b2=np.zeros(c),
        ratio=ratio,
    )


def init_afno(rng: np.random.Generator, c: int, ratio: int) -> AfnoExpertParams:
    # Spectral weights start at zero so the block is the identity; the ReLU
    # adjoint returns 1 at the kink, which lets them move off zero.
    return AfnoExpertParams(
        w1_r=np.zeros((c, c)),
        w1_i=np.zeros((c, c)),
        b1_r=np.zeros(c),
        b1_i=np.zeros(c),
        ln_gamma=np.ones(c),
        ln_beta=np.zeros(c),
        mlp=init_mlp(rng, c, ratio),
    )


def init_sub_moe(
    rng: np.random.Generator, c: int, ratio: int, routed: int, shared: int, k: int
) -> SubMoeParams:
    if k > routed:
        raise ConfigError(f"token-level k={k} exceeds routed expert count {routed}")
    return SubMoeParams(
        gate=routing.init_gate_params(rng, routed, c),
        routed=[init_mlp(rng, c, ratio) for _ in range(routed)],
        shared=[init_mlp(rng, c, ratio) for _ in range(shared)],
        k=k,
    )


def init_attention(
    rng: np.random.Generator, c: int, heads: int, ratio: int, routed: int, shared: int, k: int
) -> AttentionExpertParams:
    if c % heads:
        raise ConfigError(f"heads {heads} must divide channel dim {c}")
    u = 1.0 / np.sqrt(c)
    return AttentionExpertParams(
        ln1_gamma=np.ones(c),
        ln1_beta=np.zeros(c),
        w_q=rng.uniform(-u, u, size=(c, c)),
        w_k=rng.uniform(-u, u, size=(c, c)),
        w_v=rng.uniform(-u, u, size=(c, c)),
        w_o=np.zeros((c, c)),  # zero final projection: block starts silent
        heads=heads,
        ln2_gamma=np.ones(c),
        ln2_beta=np.zeros(c),
        sub_moe=init_sub_moe(rng, c, ratio, routed, shared, k),
    )


# ---------------------------------------------------------------------------
# token-level expert and sub-mixture
# ---------------------------------------------------------------------------


def expert_mlp(x: Var, p: MlpExpertParams) -> Var:
    t = x.tape
    h = ad.affine(x, _v(t, p.w1), _v(t, p.b1))
    return ad.affine(ad.gelu(h), _v(t, p.w2), _v(t, p.b2))


def gate_probs_var(x: Var, gate: GateParams) -> Var:
    """Differentiable routing probabilities for feature rows (..., C)."""
    t = x.tape
    w = _v(t, gate.weight)
    scores = ad.add(ad.matmul(x, ad.transpose(w, (1, 0))), _v(t, gate.bias))
    return ad.softmax(scores, axis=-1)


def sub_moe(z: Var, p: SubMoeParams, include_mask: np.ndarray | None = None):
    """Token-level mixture over (B, N, C) tokens.

    out(token) = sum(shared MLPs) + sum_{i in top-k} w_i * routed MLP_i.
    Selection indices are constants on the tape; gradients reach the gate
    only through the softmax probabilities of selected experts.

    include_mask (B, N) restricts which tokens count toward the returned
    statistics and the differentiable mean probability (used when the
    enclosing expert was routed only part of the batch).

    Returns (out, aux); aux carries the balance-loss ingredients or is
    None when no token is included.
    """
    probs = gate_probs_var(z, p.gate)  # (B, N, E)

    mask = routing.selection_masks(probs.value, p.k)
    masked = ad.mul(probs, z.tape.constant(mask))
    denom = ad.sum_(masked, axis=-1, keepdims=True)
    weights = ad.div(masked, denom)  # zero rows for unselected experts

    out = expert_mlp(z, p.shared[0])
    for s in p.shared[1:]:
        out = ad.add(out, expert_mlp(z, s))
    for e, mlp_p in enumerate(p.routed):
        w_e = ad.take_last(weights, e)  # (B, N)
        w_e = ad.reshape(w_e, w_e.shape + (1,))
        out = ad.add(out, ad.mul(expert_mlp(z, mlp_p), w_e))

    aux = _token_gate_aux(probs, mask, include_mask)
    return out, aux


def _token_gate_aux(probs: Var, sel_mask: np.ndarray, include_mask):
    """Balance-loss ingredients for one token gate: the differentiable mean
    probability vector, the constant assignment fractions, and plain stats,
    all over the included tokens."""
    b, n, e = probs.shape
    if include_mask is None:
        include_mask = np.ones((b, n))
    n_inc = float(include_mask.sum())
    if n_inc == 0:
        return None
    inc = include_mask[..., None]

    t = probs.tape
    summed = ad.sum_(ad.reshape(ad.mul(probs, t.constant(inc)), (b * n, e)), axis=0)
    mean_probs = ad.mul(summed, t.constant(np.array(1.0 / n_inc)))

    counts = (sel_mask * inc).reshape(-1, e).sum(axis=0)
    frac = counts / counts.sum()
    stats = LoadBalanceStats.from_arrays(
        (probs.value * inc).reshape(-1, e).sum(axis=0), counts.astype(np.int64), int(n_inc)
    )
    return mean_probs, frac, stats


# ---------------------------------------------------------------------------
# image-level experts
# ---------------------------------------------------------------------------


def spectral_mix(re: Var, im: Var, p: AfnoExpertParams) -> tuple[Var, Var]:
    """Learned complex channel mix with ReLU, applied at every bin.

    y_re = relu(re @ Wr - im @ Wi + br); y_im = relu(im @ Wr + re @ Wi + bi).
    Channels live on the last axis.
    """
    t = re.tape
    wr, wi, br, bi = _v(t, p.w1_r), _v(t, p.w1_i), _v(t, p.b1_r), _v(t, p.b1_i)
    y_re = ad.relu(ad.add(ad.sub(ad.matmul(re, wr), ad.matmul(im, wi)), br))
    y_im = ad.relu(ad.add(ad.add(ad.matmul(im, wr), ad.matmul(re, wi)), bi))
    return y_re, y_im


def afno_expert(x: Var, p: AfnoExpertParams) -> Var:
    """Shared spectral expert over a latent grid (B, gh, gw, C).

    h = x + ifft2(mix(fft2(x))); out = h + MLP(layer_norm(h)).
    """
    re, im = ad.fft2(x, axes=(1, 2))
    y_re, y_im = spectral_mix(re, im, p)
    spatial = ad.ifft2_real(y_re, y_im, axes=(1, 2))
    h = ad.add(x, spatial)
    t = x.tape
    normed = ad.layer_norm(h, _v(t, p.ln_gamma), _v(t, p.ln_beta), eps=LN_EPS)
    return ad.add(h, expert_mlp(normed, p.mlp))


def multi_head_attention(tokens: Var, p: AttentionExpertParams) -> Var:
    """Exact multi-head attention core over (B, N, C) tokens."""
    b, n, c = tokens.shape
    if c % p.heads:
        raise ShapeError(f"heads {p.heads} must divide channels {c}")
    d = c // p.heads
    t = tokens.tape

    def split(v):
        return ad.transpose(ad.reshape(v, (b, n, p.heads, d)), (0, 2, 1, 3))

    q = split(ad.matmul(tokens, _v(t, p.w_q)))
    k = split(ad.matmul(tokens, _v(t, p.w_k)))
    v = split(ad.matmul(tokens, _v(t, p.w_v)))

    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    scores = ad.mul(scores, t.constant(np.array(1.0 / np.sqrt(d))))
    probs = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(probs, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, c))
    return ad.matmul(ctx, _v(t, p.w_o))


def attention_expert(x: Var, p: AttentionExpertParams, include_mask: np.ndarray | None = None):
    """Routed expert over a latent grid (B, gh, gw, C).

    The grid is flattened to a token sequence; pre-norm attention with a
    residual, then the normalized tokens feed the token-level sub-mixture
    with its own residual.

    Returns (out, token_gate_aux).
    """
    b, gh, gw, c = x.shape
    tokens = ad.reshape(x, (b, gh * gw, c))
    t = x.tape

    a = ad.layer_norm(tokens, _v(t, p.ln1_gamma), _v(t, p.ln1_beta), eps=LN_EPS)
    z = ad.add(tokens, multi_head_attention(a, p))
    z_norm = ad.layer_norm(z, _v(t, p.ln2_gamma), _v(t, p.ln2_beta), eps=LN_EPS)
    moe_out, aux = sub_moe(z_norm, p.sub_moe, include_mask=include_mask)
    out = ad.add(z, moe_out)
    return ad.reshape(out, (b, gh, gw, c)), aux


# ---------------------------------------------------------------------------
# forward-only numpy twins (report paths and the tiled-attention contract)
# ---------------------------------------------------------------------------


def spectral_mix_complex(spectrum: tensor_mod.ComplexTensor, p: AfnoExpertParams) -> tensor_mod.ComplexTensor:
    """ComplexTensor form of the frequency-domain channel mix."""
    re = K.relu(spectrum.re @ p.w1_r - spectrum.im @ p.w1_i + p.b1_r)
    im = K.relu(spectrum.im @ p.w1_r + spectrum.re @ p.w1_i + p.b1_i)
    return tensor_mod.ComplexTensor(re, im)


def expert_mlp_np(x: np.ndarray, p: MlpExpertParams) -> np.ndarray:
    return K.gelu(x @ p.w1 + p.b1) @ p.w2 + p.b2


def sub_moe_np(z: np.ndarray, p: SubMoeParams) -> np.ndarray:
    probs = routing.gate_probs(z.reshape(-1, z.shape[-1]), p.gate).reshape(
        z.shape[:-1] + (p.gate.n_experts,)
    )
    mask = routing.selection_masks(probs, p.k)
    masked = probs * mask
    weights = masked / masked.sum(axis=-1, keepdims=True)
    out = sum(expert_mlp_np(z, s) for s in p.shared)
    for e, mlp_p in enumerate(p.routed):
        out = out + weights[..., e : e + 1] * expert_mlp_np(z, mlp_p)
    return out


def _attention_expert_np(x: np.ndarray, p: AttentionExpertParams, core) -> np.ndarray:
    b, gh, gw, c = x.shape
    n = gh * gw
    d = c // p.heads
    tokens = x.reshape(b, n, c)
    a, _, _ = K.layer_norm(tokens, p.ln1_gamma, p.ln1_beta, LN_EPS)

    def split(v):
        return v.reshape(b, n, p.heads, d).transpose(0, 2, 1, 3)

    ctx = core(split(a @ p.w_q), split(a @ p.w_k), split(a @ p.w_v))
    attn = ctx.transpose(0, 2, 1, 3).reshape(b, n, c) @ p.w_o
    z = tokens + attn
    z_norm, _, _ = K.layer_norm(z, p.ln2_gamma, p.ln2_beta, LN_EPS)
    out = z + sub_moe_np(z_norm, p.sub_moe)
    return out.reshape(b, gh, gw, c)


def attention_expert_np(x: np.ndarray, p: AttentionExpertParams) -> np.ndarray:
    """Forward-only twin of attention_expert (naive exact core)."""
    return _attention_expert_np(x, p, K.attention_core)


def attention_expert_tiled_np(x: np.ndarray, p: AttentionExpertParams, tile: int) -> np.ndarray:
    """Same block with the streaming-softmax blocked core; must match the
    naive block within 1e-10 for all inputs."""
    return _attention_expert_np(
        x, p, lambda q, k, v: K.attention_core_tiled(q, k, v, tile)
    )


# ---------------------------------------------------------------------------
# grad-check registrations
# ---------------------------------------------------------------------------


def _probe_loss(out: Var, pseed: int) -> Var:
    probe = np.random.default_rng(pseed).normal(size=out.shape)
    return ad.sum_(ad.mul(out, out.tape.constant(probe)))


def _register_cases() -> None:
    def build_mlp(rng):
        inputs = [
            rng.normal(size=(3, 4)),
            rng.normal(size=(4, 4)), rng.normal(size=4),
            rng.normal(size=(4, 4)), rng.normal(size=4),
        ]
        pseed = int(rng.integers(2**31))

        def fn(x, w1, b1, w2, b2):
            return _probe_loss(expert_mlp(x, MlpExpertParams(w1, b1, w2, b2)), pseed)

        return inputs, fn

    ad.register_case(ad.CheckCase("expert_mlp", build_mlp))

    def build_spectral(rng):
        c = 3
        inputs = [
            rng.normal(size=(2, 4, 4, c)), rng.normal(size=(2, 4, 4, c)),
            rng.normal(size=(c, c)), rng.normal(size=(c, c)),
            rng.normal(size=c), rng.normal(size=c),
        ]
        pseed = int(rng.integers(2**31))

        def fn(re, im, wr, wi, br, bi):
            p = AfnoExpertParams(wr, wi, br, bi, None, None, None)
            y_re, y_im = spectral_mix(re, im, p)
            g = np.random.default_rng(pseed)
            pr = y_re.tape.constant(g.normal(size=y_re.shape))
            pi = y_im.tape.constant(g.normal(size=y_im.shape))
            return ad.add(ad.sum_(ad.mul(y_re, pr)), ad.sum_(ad.mul(y_im, pi)))

        return inputs, fn

    ad.register_case(ad.CheckCase("spectral_mix", build_spectral))

    def build_afno(rng):
        c = 3
        x = rng.normal(size=(2, 4, 4, c))
        inputs = [
            x,
            0.3 * rng.normal(size=(c, c)), 0.3 * rng.normal(size=(c, c)),
            0.3 * rng.normal(size=c), 0.3 * rng.normal(size=c),
            1.0 + 0.1 * rng.normal(size=c), 0.1 * rng.normal(size=c),
            rng.normal(size=(c, c)), rng.normal(size=c),
            0.3 * rng.normal(size=(c, c)), 0.1 * rng.normal(size=c),
        ]
        pseed = int(rng.integers(2**31))

        def fn(xv, wr, wi, br, bi, g, b, mw1, mb1, mw2, mb2):
            p = AfnoExpertParams(wr, wi, br, bi, g, b, MlpExpertParams(mw1, mb1, mw2, mb2))
            return _probe_loss(afno_expert(xv, p), pseed)

        return inputs, fn

    ad.register_case(ad.CheckCase("afno_expert", build_afno))

    def build_attention(rng):
        c, heads = 4, 2
        p = init_attention(rng, c, heads, 1, routed=2, shared=1, k=1)
        # randomize the zero-initialized projections so gradients flow everywhere
        p.w_o = 0.5 * rng.normal(size=(c, c))
        for m in p.sub_moe.routed + p.sub_moe.shared:
            m.w2 = 0.5 * rng.normal(size=m.w2.shape)
            m.b2 = 0.1 * rng.normal(size=m.b2.shape)
        x = rng.normal(size=(2, 2, 2, c))
        inputs = [x, p.w_q, p.w_k, p.w_v, p.w_o, p.sub_moe.gate.weight,
                  p.sub_moe.routed[0].w1, p.sub_moe.routed[0].w2]
        pseed = int(rng.integers(2**31))

        def fn(xv, wq, wk, wv, wo, gw, rw1, rw2):
            r0 = p.sub_moe.routed[0]
            sub = SubMoeParams(
                GateParams(gw, p.sub_moe.gate.bias),
                [MlpExpertParams(rw1, r0.b1, rw2, r0.b2)] + p.sub_moe.routed[1:],
                p.sub_moe.shared,
                p.sub_moe.k,
            )
            q = AttentionExpertParams(
                p.ln1_gamma, p.ln1_beta, wq, wk, wv, wo, heads,
                p.ln2_gamma, p.ln2_beta, sub,
            )
            out, _ = attention_expert(xv, q)
            return _probe_loss(out, pseed)

        return inputs, fn

    ad.register_case(ad.CheckCase("attention_expert", build_attention))

    def build_sub_moe(rng):
        c = 4
        p = init_sub_moe(rng, c, 1, routed=3, shared=1, k=2)
        for m in p.routed + p.shared:
            m.w2 = 0.5 * rng.normal(size=m.w2.shape)
            m.b2 = 0.1 * rng.normal(size=m.b2.shape)
        x = rng.normal(size=(2, 3, c))
        inputs = [x, p.gate.weight, p.gate.bias, p.routed[1].w1, p.shared[0].w2]
        pseed = int(rng.integers(2**31))

        def fn(xv, gw, gb, r1w1, s0w2):
            r1 = p.routed[1]
            s0 = p.shared[0]
            q = SubMoeParams(
                GateParams(gw, gb),
                [p.routed[0], MlpExpertParams(r1w1, r1.b1, r1.w2, r1.b2), p.routed[2]],
                [MlpExpertParams(s0.w1, s0.b1, s0w2, s0.b2)],
                p.k,
            )
            out, _ = sub_moe(xv, q)
            return _probe_loss(out, pseed)

        return inputs, fn

    ad.register_case(ad.CheckCase("sub_moe", build_sub_moe))


_register_cases()
