"""Training and evaluation loops.

Each epoch assembles balanced-sampled batches of history windows, injects
small-scale noise, runs the tape forward/backward, clips the global
gradient norm, and applies one Adam step per batch. Everything is keyed
off one master seed through per-epoch RNG streams, so a run resumed from a
checkpoint reproduces the uninterrupted run's numbers exactly.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_mod
from . import losses, model as model_mod, pdedata, routing
from .errors import ConfigError, DataError, NumericError
from .model import ModelConfig, ModelParams
from .optim import AdamConfig, OptimState, Schedule, adam_step, clip_global_norm, lr_at
from .seeding import stream_rng

METRICS_HEADER = "epoch,lr,l2re,aux_image,aux_token,total,seconds"


@dataclass(frozen=True)
class DataSource:
    path: str
    weight: float = 1.0


@dataclass
class RunConfig:
    model: ModelConfig
    data: list[DataSource]
    epochs: int
    batch_size: int = 32
    seed: int = 0
    noise: float = 1e-3
    warmup_epochs: int = 20
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    clip_norm: float = 1.0
    init_ckpt: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.data:
            raise ConfigError("training needs at least one dataset")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        try:
            model_cfg = ModelConfig.from_dict(d.pop("model"))
            data = [DataSource(**src) for src in d.pop("data")]
            opt = AdamConfig(**d.pop("optimizer", {}))
            return cls(model=model_cfg, data=data, optimizer=opt, **d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad run config: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": [dataclasses.asdict(s) for s in self.data],
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "noise": self.noise,
            "warmup_epochs": self.warmup_epochs,
            "optimizer": dataclasses.asdict(self.optimizer),
            "clip_norm": self.clip_norm,
            "init_ckpt": self.init_ckpt,
        }


@dataclass
class LoadedDataset:
    frames: np.ndarray  # (n_traj, T_total, C, H, W)
    family: str
    weight: float
    path: str


def load_datasets(sources: list[DataSource], mcfg: ModelConfig) -> list[LoadedDataset]:
    out = []
    for src in sources:
        trajs = pdedata.read_dataset(src.path)
        if not trajs:
            raise DataError(f"{src.path}: empty dataset")
        arr = np.stack([t.frames for t in trajs])
        out.append(LoadedDataset(arr, trajs[0].family, src.weight, str(src.path)))
    shapes = {d.frames.shape[2:] for d in out}
    if len(shapes) > 1:
        raise DataError(f"datasets disagree on (C, H, W): {sorted(shapes)}")
    c, h, w = next(iter(shapes))
    if (c, h, w) != (mcfg.channels, mcfg.height, mcfg.width):
        raise DataError(
            f"data shape (C,H,W)=({c},{h},{w}) does not match model "
            f"({mcfg.channels},{mcfg.height},{mcfg.width})"
        )
    for d in out:
        if d.frames.shape[1] < mcfg.history + 1:
            raise DataError(
                f"{d.path}: trajectories too short ({d.frames.shape[1]} frames) "
                f"for history {mcfg.history} plus a target"
            )
    return out


@dataclass
class TrainResult:
    params: ModelParams
    optim: OptimState
    history: list[dict]
    checkpoint_path: Optional[str] = None


def _metrics_row(epoch, lr, l2, aux1, aux2, total, seconds) -> dict:
    return {
        "epoch": epoch,
        "lr": lr,
        "l2re": l2,
        "aux_image": aux1,
        "aux_token": aux2,
        "total": total,
        "seconds": seconds,
    }


def format_metrics_row(row: dict) -> str:
    return (
        f"{row['epoch']},{row['lr']:.10g},{row['l2re']:.10g},{row['aux_image']:.10g},"
        f"{row['aux_token']:.10g},{row['total']:.10g},{row['seconds']:.3f}"
    )


def _assemble_batch(datasets, draws, history, srng):
    frames, targets = [], []
    for ds_i, traj_i in draws:
        traj = datasets[ds_i].frames[traj_i]
        start = int(srng.integers(traj.shape[0] - history))
        frames.append(traj[start : start + history])
        targets.append(traj[start + history])
    return np.stack(frames), np.stack(targets)


def train_step(params, mcfg: ModelConfig, frames, targets):
    """One forward/backward pass; returns (grads by name, loss parts)."""
    tape = ad.Tape()
    bound, leaves = model_mod.bind_params(tape, params)
    res = model_mod.forward(frames, bound, mcfg, tape=tape)
    l2 = losses.l2re_var(res.pred, targets)
    loss = losses.total_loss_var(l2, res.aux_image, res.aux_token, mcfg.loss)
    grad_map = tape.backward(loss)
    grads = {name: grad_map.grad(v) for name, v in leaves.items()}
    parts = {
        "l2re": float(l2.value),
        "aux_image": float(res.aux_image.value),
        "aux_token": float(res.aux_token.value) if res.aux_token is not None else 0.0,
        "total": float(loss.value),
    }
    return grads, parts


def train(cfg: RunConfig, out_dir=None, log=print) -> TrainResult:
    mcfg = cfg.model
    datasets = load_datasets(cfg.data, mcfg)
    sampler_cfg = pdedata.SamplerConfig(
        weights=tuple(d.weight for d in datasets),
        sizes=tuple(d.frames.shape[0] for d in datasets),
    )
    total_samples = sum(d.frames.shape[0] for d in datasets)
    steps_per_epoch = -(-total_samples // cfg.batch_size)  # ceil

    if cfg.init_ckpt:
        params, optim, ck_cfg, seed_state = ckpt_mod.load_checkpoint(cfg.init_ckpt)
        if ck_cfg.to_dict() != mcfg.to_dict():
            raise ConfigError("checkpoint model config differs from run config")
        if optim is None:
            flat = dict(model_mod.flatten_params(params))
            optim = OptimState.for_params(flat, cfg.optimizer)
        master = int(seed_state.get("master_seed", cfg.seed))
        start_epoch = int(seed_state.get("next_epoch", 0))
    else:
        master = cfg.seed
        params = model_mod.init_model_params(mcfg, stream_rng(master, "init"))
        optim = OptimState.for_params(dict(model_mod.flatten_params(params)), cfg.optimizer)
        start_epoch = 0

    if start_epoch > cfg.epochs:
        raise ConfigError(
            f"checkpoint already at epoch {start_epoch}, run targets {cfg.epochs}"
        )

    sched = Schedule(cfg.optimizer.lr, min(cfg.warmup_epochs, cfg.epochs), cfg.epochs)
    template = params
    names = [n for n, _ in model_mod.flatten_params(template)]

    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        metrics_path.write_text(METRICS_HEADER + "\n")

    history: list[dict] = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.time()
        lr = lr_at(sched, epoch)
        srng = stream_rng(master, "sampler", epoch)
        nrng = stream_rng(master, "noise", epoch)
        sums = {"l2re": 0.0, "aux_image": 0.0, "aux_token": 0.0, "total": 0.0}
        for step in range(steps_per_epoch):
            draws = pdedata.draw_samples(sampler_cfg, cfg.batch_size, srng)
            frames, targets = _assemble_batch(datasets, draws, mcfg.history, srng)
            frames = model_mod.inject_noise(frames, cfg.noise, nrng)
            try:
                grads, parts = train_step(params, mcfg, frames, targets)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from None
            if not np.isfinite(parts["total"]):
                raise NumericError(
                    f"epoch {epoch} step {step}: loss became {parts['total']}"
                )
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            flat = dict(model_mod.flatten_params(params))
            new_flat = adam_step(flat, grads, optim, lr=lr)
            params = model_mod.unflatten_params(template, [new_flat[n] for n in names])
            for k in sums:
                sums[k] += parts[k]

        row = _metrics_row(
            epoch,
            lr,
            sums["l2re"] / steps_per_epoch,
            sums["aux_image"] / steps_per_epoch,
            sums["aux_token"] / steps_per_epoch,
            sums["total"] / steps_per_epoch,
            time.time() - t0,
        )
        history.append(row)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(format_metrics_row(row) + "\n")
        if log and (epoch % 20 == 0 or epoch == cfg.epochs - 1):
            log(
                f"epoch {epoch:4d} lr {row['lr']:.2e} l2re {row['l2re']:.4f} "
                f"total {row['total']:.4f}"
            )

    ckpt_path = None
    if out_dir is not None:
        ckpt_path = str(Path(out_dir) / "checkpoint.nstr")
        ckpt_mod.save_checkpoint(
            params,
            optim,
            mcfg,
            {"master_seed": master, "next_epoch": cfg.epochs},
            ckpt_path,
        )
    return TrainResult(params, optim, history, ckpt_path)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class GateStatsBundle:
    """Merged balance statistics per image gate (by layer) and per token
    gate (by layer and routed-expert index)."""

    image: dict[int, routing.LoadBalanceStats] = field(default_factory=dict)
    token: dict[tuple[int, int], routing.LoadBalanceStats] = field(default_factory=dict)

    def absorb(self, res: model_mod.ForwardResult) -> None:
        for li, st in enumerate(res.image_stats):
            self.image[li] = st if li not in self.image else self.image[li].merge(st)
        for rec in res.token_stats:
            key = (rec.layer, rec.expert)
            self.token[key] = (
                rec.stats if key not in self.token else self.token[key].merge(rec.stats)
            )

    def image_fractions(self) -> np.ndarray:
        """Expert assignment fractions aggregated across all image gates."""
        counts = sum(st.counts for st in self.image.values())
        return counts / counts.sum()


@dataclass
class EvalResult:
    one_step: float
    persistence: float
    rollout: list[float]
    rollout_persistence: list[float]
    stats: GateStatsBundle
    family_fractions: dict[str, np.ndarray]
    n_windows: int


def evaluate(
    params: ModelParams,
    mcfg: ModelConfig,
    datasets: list[LoadedDataset],
    rollout_steps: int = 0,
    chunk: int = 64,
) -> EvalResult:
    """One-step and rollout relative errors over every valid window, the
    persistence baseline, and per-gate routing statistics. No noise."""
    t_hist = mcfg.history
    stats = GateStatsBundle()
    per_family_stats: dict[str, GateStatsBundle] = {}

    one_sum, pers_sum, n_windows = 0.0, 0.0, 0
    for ds in datasets:
        n_traj, t_total = ds.frames.shape[:2]
        windows = [
            (i, s) for i in range(n_traj) for s in range(t_total - t_hist)
        ]
        fam_bundle = per_family_stats.setdefault(ds.family, GateStatsBundle())
        for lo in range(0, len(windows), chunk):
            part = windows[lo : lo + chunk]
            frames = np.stack([ds.frames[i, s : s + t_hist] for i, s in part])
            targets = np.stack([ds.frames[i, s + t_hist] for i, s in part])
            res = model_mod.forward(frames, params, mcfg)
            stats.absorb(res)
            fam_bundle.absorb(res)
            b = len(part)
            one_sum += losses.l2re(res.prediction, targets).value * b
            pers_sum += losses.l2re(model_mod.persistence_prediction(frames), targets).value * b
            n_windows += b

    roll_model: list[float] = []
    roll_pers: list[float] = []
    if rollout_steps > 0:
        sums_m = np.zeros(rollout_steps)
        sums_p = np.zeros(rollout_steps)
        count = 0
        for ds in datasets:
            n_traj, t_total = ds.frames.shape[:2]
            max_start = t_total - t_hist - rollout_steps
            if max_start < 0:
                raise DataError(
                    f"{ds.path}: trajectories too short for a {rollout_steps}-step rollout"
                )
            starts = list(range(max_start + 1))
            windows = [(i, s) for i in range(n_traj) for s in starts]
            for lo in range(0, len(windows), chunk):
                part = windows[lo : lo + chunk]
                frames = np.stack([ds.frames[i, s : s + t_hist] for i, s in part])
                preds = model_mod.rollout(frames, params, mcfg, rollout_steps)
                last = model_mod.persistence_prediction(frames)
                for step in range(rollout_steps):
                    truth = np.stack(
                        [ds.frames[i, s + t_hist + step] for i, s in part]
                    )
                    sums_m[step] += losses.l2re(preds[:, step], truth).value * len(part)
                    sums_p[step] += losses.l2re(last, truth).value * len(part)
                count += len(part)
        roll_model = list(sums_m / count)
        roll_pers = list(sums_p / count)

    family_fractions = {
        fam: bundle.image_fractions() for fam, bundle in per_family_stats.items()
    }
    return EvalResult(
        one_step=one_sum / n_windows,
        persistence=pers_sum / n_windows,
        rollout=roll_model,
        rollout_persistence=roll_pers,
        stats=stats,
        family_fractions=family_fractions,
        n_windows=n_windows,
    )


# ---------------------------------------------------------------------------
# routing report
# ---------------------------------------------------------------------------


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass
class RoutingReport:
    """Per-family expert activation percentages plus pairwise total
    variation distances between the family distributions."""

    families: list[str]
    percentages: dict[str, np.ndarray]
    tv: dict[tuple[str, str], float]


def routing_report(family_fractions: dict[str, np.ndarray]) -> RoutingReport:
    if len(family_fractions) < 2:
        raise ConfigError("routing report needs at least two dataset families")
    families = sorted(family_fractions)
    percentages = {f: 100.0 * np.asarray(family_fractions[f]) for f in families}
    tv = {}
    for i, f1 in enumerate(families):
        for f2 in families[i + 1 :]:
            tv[(f1, f2)] = total_variation(family_fractions[f1], family_fractions[f2])
    return RoutingReport(families, percentages, tv)
