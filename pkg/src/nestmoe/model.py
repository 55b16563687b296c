"""Full operator assembly: encoder, stacked nested-MoE layers, head.

One layer combines its experts in delta form,

    out = x + sum_shared (afno(x) - x) + sum_{i in top-k} w_i (attn_i(x) - x),

so that a freshly initialized network (all final projections zero) is the
exact identity between encoder and head. Routed experts are evaluated on
the whole batch with per-sample weights that are exactly zero where the
gate did not select them; experts selected by no sample are skipped.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from . import encoding, experts, losses, routing
from .autodiff import Tape, Var
from .encoding import EncoderParams, PatchConfig
from .errors import ConfigError
from .experts import AfnoExpertParams, AttentionExpertParams
from .losses import LossConfig
from .routing import GateParams, LoadBalanceStats

# Published large-configuration reference: 13M activated of 83M total
# parameters, stated as a 16.67% activation ratio.
REFERENCE_ACTIVATION_RATIO = 0.1667


@dataclass(frozen=True)
class ModelConfig:
    history: int = 4
    channels: int = 1
    height: int = 16
    width: int = 16
    patch: int = 4
    embed_dim: int = 32
    layers: int = 2
    heads: int = 2
    mlp_ratio: int = 1
    image_routed: int = 3
    image_shared: int = 1
    image_k: int = 2
    token_routed: int = 3
    token_shared: int = 1
    token_k: int = 2
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("need at least one layer")
        if self.history < 1:
            raise ConfigError("history must be >= 1")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"patch {self.patch} must divide the {self.height}x{self.width} field"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide embed dim {self.embed_dim}")
        if self.image_k > self.image_routed or self.image_k < 1:
            raise ConfigError(
                f"image-level k={self.image_k} out of range for {self.image_routed} routed experts"
            )
        if self.token_k > self.token_routed or self.token_k < 1:
            raise ConfigError(
                f"token-level k={self.token_k} out of range for {self.token_routed} routed experts"
            )
        if self.image_shared < 1 or self.token_shared < 1:
            raise ConfigError("each level needs at least one shared expert")
        for side in (self.height // self.patch, self.width // self.patch):
            if side < 1 or side & (side - 1):
                raise ConfigError(
                    f"token grid sides must be powers of two for the spectral expert, got {side}"
                )

    @property
    def patch_cfg(self) -> PatchConfig:
        return PatchConfig.for_field(self.height, self.width, self.patch, self.embed_dim)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        loss = d.pop("loss", {})
        try:
            return cls(loss=LossConfig(**loss), **d)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from None


@dataclass
class LayerParams:
    image_gate: GateParams
    shared: list[AfnoExpertParams]
    routed: list[AttentionExpertParams]


@dataclass
class ModelParams:
    encoder: EncoderParams
    layers: list[LayerParams]


def init_model_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    d = cfg.embed_dim
    enc = encoding.init_encoder_params(rng, cfg.channels, cfg.history, cfg.patch_cfg)
    layers = []
    for _ in range(cfg.layers):
        layers.append(
            LayerParams(
                image_gate=routing.init_gate_params(rng, cfg.image_routed, d),
                shared=[
                    experts.init_afno(rng, d, cfg.mlp_ratio)
                    for _ in range(cfg.image_shared)
                ],
                routed=[
                    experts.init_attention(
                        rng, d, cfg.heads, cfg.mlp_ratio,
                        cfg.token_routed, cfg.token_shared, cfg.token_k,
                    )
                    for _ in range(cfg.image_routed)
                ],
            )
        )
    return ModelParams(encoder=enc, layers=layers)


# ---------------------------------------------------------------------------
# parameter tree traversal (the checkpoint ordering contract)
# ---------------------------------------------------------------------------

_PARAM_NODES = (
    ModelParams,
    EncoderParams,
    LayerParams,
    GateParams,
    AfnoExpertParams,
    AttentionExpertParams,
    experts.SubMoeParams,
    experts.MlpExpertParams,
)


def iter_params(node, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield (dotted-name, array) leaves in a stable documented order:
    dataclass fields in declaration order, list entries by index."""
    if isinstance(node, _PARAM_NODES):
        for f in dataclasses.fields(node):
            yield from iter_params(getattr(node, f.name), f"{prefix}{f.name}.")
    elif isinstance(node, list):
        for i, item in enumerate(node):
            yield from iter_params(item, f"{prefix}{i}.")
    elif isinstance(node, (np.ndarray, Var)):
        yield prefix[:-1], node
    # ints/floats (heads, ratio, k) are structure, not parameters


def flatten_params(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    return list(iter_params(params))


def _rebuild(node, feed: Iterator):
    if isinstance(node, _PARAM_NODES):
        kwargs = {}
        for f in dataclasses.fields(node):
            kwargs[f.name] = _rebuild(getattr(node, f.name), feed)
        return type(node)(**kwargs)
    if isinstance(node, list):
        return [_rebuild(item, feed) for item in node]
    if isinstance(node, (np.ndarray, Var)):
        return next(feed)
    return node


def unflatten_params(template: ModelParams, leaves) -> ModelParams:
    """Rebuild the tree from leaves given in flatten order. Leaves may be
    arrays or tape Vars."""
    feed = iter(leaves)
    out = _rebuild(template, feed)
    rest = list(feed)
    if rest:
        raise ConfigError(f"unflatten_params got {len(rest)} extra leaves")
    return out


def bind_params(tape: Tape, params: ModelParams):
    """Create one tape leaf per parameter; returns (bound tree, name->Var)."""
    named = flatten_params(params)
    leaves = {name: tape.leaf(arr) for name, arr in named}
    bound = unflatten_params(params, [leaves[name] for name, _ in named])
    return bound, leaves


def clone_params(params: ModelParams) -> ModelParams:
    named = flatten_params(params)
    return unflatten_params(params, [arr.copy() for _, arr in named])


def randomize_silent_params(params: ModelParams, rng: np.random.Generator, scale: float = 0.2) -> ModelParams:
    """Replace every all-zero tensor (the silent final projections and
    biases of a fresh init) with small random values. Used by gradient
    checks, which need every path live."""
    named = flatten_params(params)
    out = []
    for _, arr in named:
        if np.all(arr == 0):
            out.append(scale * rng.normal(size=arr.shape))
        else:
            out.append(arr.copy())
    return unflatten_params(params, out)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


@dataclass
class TokenGateRecord:
    layer: int
    expert: int
    stats: LoadBalanceStats


@dataclass
class ForwardResult:
    pred: Var
    image_stats: list[LoadBalanceStats]
    image_decisions: list[list[routing.RoutingDecision]]  # per layer, per sample
    token_stats: list[TokenGateRecord]
    aux_image: Var
    aux_token: Optional[Var]

    @property
    def prediction(self) -> np.ndarray:
        return self.pred.value


def nested_moe_layer(x: Var, lp: LayerParams, image_k: int):
    """One mixture layer over a latent grid (B, gh, gw, D).

    Returns (out, image_aux, token_auxes, stats, decisions).
    """
    b, gh, gw, _ = x.shape
    pooled = ad.mean(x, axis=(1, 2))  # (B, D)
    probs = experts.gate_probs_var(pooled, lp.image_gate)  # (B, R)
    probs_val = probs.value

    sel_mask = routing.selection_masks(probs_val, image_k)
    masked = ad.mul(probs, x.tape.constant(sel_mask))
    weights = ad.div(masked, ad.sum_(masked, axis=-1, keepdims=True))

    out = x
    for sp in lp.shared:
        out = ad.add(out, ad.sub(experts.afno_expert(x, sp), x))

    token_auxes = []
    for j, attn in enumerate(lp.routed):
        chosen = sel_mask[:, j]
        if chosen.sum() == 0:
            continue  # expert selected by no sample this batch
        include = np.broadcast_to(chosen[:, None], (b, gh * gw)).copy()
        block_out, aux = experts.attention_expert(x, attn, include_mask=include)
        delta = ad.sub(block_out, x)
        w_j = ad.reshape(ad.take_last(weights, j), (b, 1, 1, 1))
        out = ad.add(out, ad.mul(delta, w_j))
        if aux is not None:
            token_auxes.append((j, aux))

    stats = routing.stats_from_probs(probs_val, image_k)
    decisions = [routing.decide(row, image_k) for row in probs_val]
    image_aux = (ad.mean(probs, axis=0), stats.assign_frac)
    return out, image_aux, token_auxes, stats, decisions


def forward(
    frames: np.ndarray,
    params: ModelParams,
    cfg: ModelConfig,
    tape: Optional[Tape] = None,
) -> ForwardResult:
    """Predict the next frame from the preceding T frames.

    frames: (B, T, C, H, W). Returns the prediction Var plus every gate's
    balance statistics and the differentiable auxiliary loss terms
    (averaged across layers / across executed token gates).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 5 or frames.shape[1] != cfg.history:
        raise ConfigError(
            f"expected frames (B, {cfg.history}, C, H, W), got {frames.shape}"
        )
    if tape is None:
        tape = Tape()
    pcfg = cfg.patch_cfg
    b = frames.shape[0]

    enc = params.encoder
    latents = []
    for t_idx in range(cfg.history):
        f = tape.constant(frames[:, t_idx])
        latents.append(encoding.encode_frame(f, enc, pcfg))

    temporal = enc.temporal
    if isinstance(temporal, Var):
        slices = [
            ad.take_last(ad.transpose(temporal, (1, 2, 0)), t_i)
            for t_i in range(cfg.history)
        ]
    else:
        slices = [tape.constant(temporal[t_i]) for t_i in range(cfg.history)]
    latent = encoding.temporal_aggregate(latents, slices)

    image_stats, image_auxes, token_records, token_auxes, image_decisions = [], [], [], [], []
    for li, lp in enumerate(params.layers):
        latent, image_aux, layer_token_auxes, stats, decisions = nested_moe_layer(
            latent, lp, cfg.image_k
        )
        image_stats.append(stats)
        image_decisions.append(decisions)
        image_auxes.append(image_aux)
        for j, aux in layer_token_auxes:
            mean_probs, frac, tstats = aux
            token_auxes.append((mean_probs, frac))
            token_records.append(TokenGateRecord(li, j, tstats))

    pred = encoding.decode_head(latent, enc.head_proj, enc.head_bias, pcfg, cfg.channels)

    aux_image = _average_balance([losses.load_balance_loss_var(mp, f) for mp, f in image_auxes])
    aux_token = (
        _average_balance([losses.load_balance_loss_var(mp, f) for mp, f in token_auxes])
        if token_auxes
        else None
    )
    return ForwardResult(pred, image_stats, image_decisions, token_records, aux_image, aux_token)


def _average_balance(terms: list[Var]) -> Var:
    out = terms[0]
    for t_var in terms[1:]:
        out = ad.add(out, t_var)
    return ad.mul(out, out.tape.constant(np.array(1.0 / len(terms))))


def predict(frames: np.ndarray, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Forward pass returning a plain array (fresh private tape)."""
    return forward(frames, params, cfg).prediction


def rollout(
    initial: np.ndarray, params: ModelParams, cfg: ModelConfig, steps: int
) -> np.ndarray:
    """Autoregressive prediction: feed each output back, dropping the
    oldest frame. No noise at inference. Returns (B, steps, C, H, W)."""
    if steps < 1:
        raise ConfigError(f"rollout needs steps >= 1, got {steps}")
    window = np.asarray(initial, dtype=np.float64).copy()
    preds = []
    for _ in range(steps):
        nxt = predict(window, params, cfg)
        preds.append(nxt)
        window = np.concatenate([window[:, 1:], nxt[:, None]], axis=1)
    return np.stack(preds, axis=1)


def persistence_prediction(frames: np.ndarray) -> np.ndarray:
    """Baseline: the next frame equals the last observed frame."""
    return np.asarray(frames)[:, -1]


def inject_noise(frames: np.ndarray, scale: float, rng) -> np.ndarray:
    """Add zero-mean Gaussian noise, std = scale * std(frame), independently
    per (batch, time) frame. Training-time only."""
    if scale < 0:
        raise ConfigError(f"noise scale must be >= 0, got {scale}")
    if scale == 0:
        return np.asarray(frames, dtype=np.float64)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    frames = np.asarray(frames, dtype=np.float64)
    stds = frames.std(axis=(-3, -2, -1), keepdims=True)
    return frames + rng.normal(size=frames.shape) * (scale * stds)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def _tree_size(node) -> int:
    return sum(arr.size for _, arr in iter_params(node))


def param_counts(cfg: ModelConfig) -> dict:
    """Total vs activated parameter counts and their ratio.

    Activated = encoder + head + every gate + all shared experts + k
    routed experts at the image level, each of which activates its own
    token gate, token-shared MLPs, and k token-routed MLPs.
    """
    params = init_model_params(cfg, np.random.default_rng(0))
    total = _tree_size(params)

    activated = _tree_size(params.encoder)
    for lp in params.layers:
        activated += _tree_size(lp.image_gate)
        activated += sum(_tree_size(s) for s in lp.shared)
        attn = lp.routed[0]
        attn_active = (
            _tree_size(attn)
            - sum(_tree_size(m) for m in attn.sub_moe.routed)
            + cfg.token_k * _tree_size(attn.sub_moe.routed[0])
        )
        activated += cfg.image_k * attn_active
    return {"total": total, "activated": activated, "ratio": activated / total}


# ---------------------------------------------------------------------------
# grad-check registrations
# ---------------------------------------------------------------------------


def _register_cases() -> None:
    def build_layer(rng):
        cfg = ModelConfig(
            history=1, channels=1, height=8, width=8, patch=4, embed_dim=4,
            layers=1, heads=2, image_routed=2, image_k=1, token_routed=2, token_k=1,
        )
        params = randomize_silent_params(init_model_params(cfg, rng), rng)
        lp = params.layers[0]
        x = rng.normal(size=(2, 2, 2, 4))
        named = flatten_params(ModelParams(params.encoder, [lp]))
        layer_named = [(n, a) for n, a in named if n.startswith("layers.")]
        inputs = [x] + [a for _, a in layer_named]
        pseed = int(rng.integers(2**31))

        def fn(xv, *leaf_vars):
            rebuilt = unflatten_params(
                ModelParams(params.encoder, [lp]),
                [v for v in _feed_mixed(named, layer_named, leaf_vars)],
            )
            out, _, _, _, _ = nested_moe_layer(xv, rebuilt.layers[0], cfg.image_k)
            probe = np.random.default_rng(pseed).normal(size=out.shape)
            return ad.sum_(ad.mul(out, out.tape.constant(probe)))

        return inputs, fn

    def _feed_mixed(all_named, chosen_named, leaf_vars):
        chosen = {name: v for (name, _), v in zip(chosen_named, leaf_vars)}
        for name, arr in all_named:
            yield chosen.get(name, arr)

    ad.register_case(ad.CheckCase("nested_moe_layer", build_layer, max_coords=4))

    def build_forward(rng):
        cfg = ModelConfig()  # the desk configuration
        params = randomize_silent_params(init_model_params(cfg, rng), rng)
        named = flatten_params(params)
        b = 2
        frames = rng.normal(size=(b, cfg.history, cfg.channels, cfg.height, cfg.width))
        targets = rng.normal(size=(b, cfg.channels, cfg.height, cfg.width))
        inputs = [a for _, a in named]

        def fn(*leaf_vars):
            rebuilt = unflatten_params(params, list(leaf_vars))
            tape = leaf_vars[0].tape
            res = forward(frames, rebuilt, cfg, tape=tape)
            l2 = losses.l2re_var(res.pred, targets)
            return losses.total_loss_var(l2, res.aux_image, res.aux_token, cfg.loss)

        return inputs, fn

    ad.register_case(
        ad.CheckCase("forward_total_loss", build_forward, max_coords=2, default_tol=1e-4)
    )


_register_cases()
