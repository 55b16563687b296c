"""Synthetic PDE trajectories, channel padding/masking, the balanced
sampler, and the on-disk dataset format.

Generators use explicit finite differences on a periodic unit-spaced grid:
forward-time centered-space for diffusion, first-order upwind for
transport, and an explicit logistic reaction step. Stability bounds are
enforced eagerly; the raw steppers are exposed for oracle-style tests.

File format: magic "PDED", u16 version, u16 family id, u32 counts
(n_traj, T_total, C, H, W), u8 dtype tag (0 = f32, 1 = f64), little-endian
payload of row-major frames, trailing CRC32 of the payload. A JSON sidecar
(same stem + ".meta.json") records the generating spec and seed.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, StabilityError

FAMILIES = ("heat", "advection", "dr")
_MAGIC = b"PDED"
_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass(frozen=True)
class PdeInstanceSpec:
    """One trajectory-generation recipe.

    Grid spacing is 1 in both directions; periodic boundaries everywhere.
    """

    family: str
    height: int = 16
    width: int = 16
    frames: int = 8
    dt: float = 1.0
    diffusivity: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)
    reaction_rate: float = 0.0
    band_limit: int = 4
    amplitude: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown PDE family {self.family!r}; expected one of {FAMILIES}")
        if self.frames < 1:
            raise ConfigError("need at least one frame")
        if self.band_limit < 1:
            raise ConfigError("band_limit must be >= 1")
        self.check_stability()

    def check_stability(self) -> None:
        if self.family in ("heat", "dr"):
            bound = self.diffusivity * self.dt * 2.0  # 1/dx^2 + 1/dy^2 at dx=dy=1
            if bound > 0.25:
                raise StabilityError(
                    f"diffusion bound D*dt*(1/dx^2+1/dy^2) = {bound:.4f} exceeds 0.25"
                )
        if self.family == "advection":
            vx, vy = self.velocity
            courant = max(abs(vx), abs(vy)) * self.dt
            if courant > 0.5:
                raise StabilityError(
                    f"CFL |v|*dt/dx = {courant:.4f} exceeds 0.5"
                )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["velocity"] = list(self.velocity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PdeInstanceSpec":
        d = dict(d)
        if "velocity" in d:
            d["velocity"] = tuple(d["velocity"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad PDE spec: {exc}") from None


# ---------------------------------------------------------------------------
# raw periodic steppers (unit grid spacing)
# ---------------------------------------------------------------------------


def laplacian5(u: np.ndarray) -> np.ndarray:
    """Periodic 5-point Laplacian, unit spacing."""
    return (
        np.roll(u, 1, axis=-2)
        + np.roll(u, -1, axis=-2)
        + np.roll(u, 1, axis=-1)
        + np.roll(u, -1, axis=-1)
        - 4.0 * u
    )


def step_heat(u: np.ndarray, diffusivity: float, dt: float) -> np.ndarray:
    return u + diffusivity * dt * laplacian5(u)


def step_advection(u: np.ndarray, vx: float, vy: float, dt: float) -> np.ndarray:
    """First-order upwind transport. Axis -2 is y (height), -1 is x (width);
    positive velocity moves the field toward increasing index."""
    out = u.copy()
    if vx > 0:
        out = out - vx * dt * (u - np.roll(u, 1, axis=-1))
    elif vx < 0:
        out = out - vx * dt * (np.roll(u, -1, axis=-1) - u)
    ux = out
    if vy > 0:
        ux = ux - vy * dt * (u - np.roll(u, 1, axis=-2))
    elif vy < 0:
        ux = ux - vy * dt * (np.roll(u, -1, axis=-2) - u)
    return ux


def step_dr(u: np.ndarray, diffusivity: float, rate: float, dt: float) -> np.ndarray:
    """Diffusion plus an explicit logistic reaction r*u*(1-u)."""
    return u + dt * (diffusivity * laplacian5(u) + rate * u * (1.0 - u))


def smooth_field(rng: np.random.Generator, h: int, w: int, band_limit: int, amplitude: float) -> np.ndarray:
    """Band-limited random smooth field built from low-frequency modes.

    Gaussian coefficients on modes with max(|kx|, |ky|) <= band_limit,
    inverse-transformed and scaled to the requested RMS amplitude.
    """
    spec = np.zeros((h, w), dtype=np.complex128)
    kx = np.fft.fftfreq(w, d=1.0 / w).astype(int)
    ky = np.fft.fftfreq(h, d=1.0 / h).astype(int)
    for iy in range(h):
        for ix in range(w):
            if max(abs(kx[ix]), abs(ky[iy])) <= band_limit:
                spec[iy, ix] = rng.normal() + 1j * rng.normal()
    u = np.fft.ifft2(spec).real
    rms = np.sqrt(np.mean(u**2))
    if rms > 0:
        u = u * (amplitude / rms)
    return u


@dataclass
class Trajectory:
    """(T_total, C, H, W) spatiotemporal field sample plus its family tag."""

    frames: np.ndarray
    family: str

    @property
    def shape(self) -> tuple[int, ...]:
        return self.frames.shape


def _evolve(u0: np.ndarray, spec: PdeInstanceSpec, step) -> Trajectory:
    frames = np.empty((spec.frames, 1, spec.height, spec.width))
    u = u0
    frames[0, 0] = u
    for t in range(1, spec.frames):
        u = step(u)
        frames[t, 0] = u
    return Trajectory(frames, spec.family)


def _initial(spec: PdeInstanceSpec, rng: np.random.Generator) -> np.ndarray:
    # family-independent construction: a dr spec with zero reaction rate
    # reproduces the heat stream bit for bit under the same seed
    return spec.offset + smooth_field(
        rng, spec.height, spec.width, spec.band_limit, spec.amplitude
    )


def gen_heat2d(spec: PdeInstanceSpec, seed: int) -> Trajectory:
    if spec.family != "heat":
        raise ConfigError(f"gen_heat2d got family {spec.family!r}")
    rng = np.random.default_rng([seed, 11])
    u0 = _initial(spec, rng)
    return _evolve(u0, spec, lambda u: step_heat(u, spec.diffusivity, spec.dt))


def gen_advection2d(spec: PdeInstanceSpec, seed: int) -> Trajectory:
    if spec.family != "advection":
        raise ConfigError(f"gen_advection2d got family {spec.family!r}")
    rng = np.random.default_rng([seed, 11])
    u0 = _initial(spec, rng)
    vx, vy = spec.velocity
    return _evolve(u0, spec, lambda u: step_advection(u, vx, vy, spec.dt))


def gen_dr2d(spec: PdeInstanceSpec, seed: int) -> Trajectory:
    if spec.family != "dr":
        raise ConfigError(f"gen_dr2d got family {spec.family!r}")
    rng = np.random.default_rng([seed, 11])
    u0 = _initial(spec, rng)
    return _evolve(
        u0, spec, lambda u: step_dr(u, spec.diffusivity, spec.reaction_rate, spec.dt)
    )


_GENERATORS = {"heat": gen_heat2d, "advection": gen_advection2d, "dr": gen_dr2d}


def generate(spec: PdeInstanceSpec, seed: int) -> Trajectory:
    traj = _GENERATORS[spec.family](spec, seed)
    if not np.all(np.isfinite(traj.frames)):
        raise StabilityError("generator produced non-finite values despite stability bounds")
    return traj


# ---------------------------------------------------------------------------
# padding and masking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSchema:
    """Unified channel layout across mixed families: native channels are
    padded with ones up to channels_max, optionally followed by a 0/1
    geometry mask channel (all ones on these regular grids)."""

    channels_max: int
    mask_channel: bool = False

    @property
    def total_channels(self) -> int:
        return self.channels_max + (1 if self.mask_channel else 0)


def pad_and_mask(traj: Trajectory, schema: DatasetSchema) -> Trajectory:
    t, c, h, w = traj.frames.shape
    if c > schema.channels_max:
        raise ConfigError(
            f"trajectory has {c} channels, schema allows at most {schema.channels_max}"
        )
    if c == schema.channels_max and not schema.mask_channel:
        return traj
    out = np.ones((t, schema.total_channels, h, w))
    out[:, :c] = traj.frames
    return Trajectory(out, traj.family)


def strip_padding(traj: Trajectory, native_channels: int) -> Trajectory:
    return Trajectory(traj.frames[:, :native_channels].copy(), traj.family)


# ---------------------------------------------------------------------------
# balanced sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    weights: tuple[float, ...]
    sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.sizes) or not self.weights:
            raise ConfigError("sampler needs matching, non-empty weights and sizes")
        if any(w <= 0 for w in self.weights):
            raise ConfigError("sampler weights must be > 0")
        if any(s <= 0 for s in self.sizes):
            raise ConfigError("sampler dataset sizes must be > 0")


def sampler_probs(cfg: SamplerConfig, log=None) -> np.ndarray:
    """Per-sample draw probability for each dataset.

    The per-sample weight is w_k / |D_k|; probabilities are normalized so
    that sum_k |D_k| p_k == 1. The direct per-sample form w_k/(K |D_k| sum w)
    misses that normalization by a factor K, which is logged when corrected.
    """
    w = np.asarray(cfg.weights, dtype=np.float64)
    sizes = np.asarray(cfg.sizes, dtype=np.float64)
    k = len(cfg.weights)
    raw = w / (k * sizes * w.sum())
    total = float(np.dot(sizes, raw))
    p = raw / total
    if log is not None and abs(total - 1.0) > 1e-12:
        log(f"sampler renormalized by {1.0 / total:g} (raw mass {total:g})")
    return p


def draw_samples(cfg: SamplerConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n (dataset, index) pairs with replacement; returns (n, 2)."""
    p = sampler_probs(cfg)
    dataset_p = p * np.asarray(cfg.sizes)
    ds = rng.choice(len(cfg.sizes), size=n, p=dataset_p / dataset_p.sum())
    idx = np.empty(n, dtype=np.int64)
    for i, d in enumerate(ds):
        idx[i] = rng.integers(cfg.sizes[d])
    return np.stack([ds, idx.astype(np.int64)], axis=1)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def write_dataset(trajs: list[Trajectory], path, spec: PdeInstanceSpec | None = None,
                  seed: int | None = None, dtype_tag: int = 0) -> None:
    """Write trajectories (all one family and shape) plus a JSON sidecar."""
    path = Path(path)
    if dtype_tag not in _DTYPES:
        raise ConfigError(f"unknown dtype tag {dtype_tag}")
    if trajs:
        shape = trajs[0].frames.shape
        family = trajs[0].family
        for tr in trajs:
            if tr.frames.shape != shape or tr.family != family:
                raise ConfigError("all trajectories in one file must share shape and family")
        t, c, h, w = shape
        fam_id = FAMILIES.index(family)
        payload = np.concatenate([tr.frames[None] for tr in trajs]).astype(_DTYPES[dtype_tag]).tobytes()
    else:
        t = c = h = w = 0
        fam_id = 0
        payload = b""
    header = _MAGIC + struct.pack(
        "<HHIIIIIB", _VERSION, fam_id, len(trajs), t, c, h, w, dtype_tag
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))
    meta = {
        "spec": spec.to_dict() if spec else None,
        "seed": seed,
        "n_traj": len(trajs),
    }
    path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(meta, indent=2))


def read_dataset(path) -> list[Trajectory]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    head_len = 4 + struct.calcsize("<HHIIIIIB")
    if len(blob) < head_len + 4:
        raise DataError(f"{path}: truncated file ({len(blob)} bytes)")
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    version, fam_id, n_traj, t, c, h, w, dtype_tag = struct.unpack(
        "<HHIIIIIB", blob[4:head_len]
    )
    if version != _VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if dtype_tag not in _DTYPES:
        raise DataError(f"{path}: unknown dtype tag {dtype_tag}")
    dt = _DTYPES[dtype_tag]
    n_items = n_traj * t * c * h * w
    payload = blob[head_len : head_len + n_items * dt.itemsize]
    if len(payload) != n_items * dt.itemsize or len(blob) != head_len + len(payload) + 4:
        raise DataError(f"{path}: payload size mismatch")
    (crc,) = struct.unpack("<I", blob[-4:])
    if crc != zlib.crc32(payload):
        raise DataError(f"{path}: payload CRC mismatch")
    if n_traj == 0:
        return []
    family = FAMILIES[fam_id]
    arr = np.frombuffer(payload, dtype=dt).astype(np.float64).reshape(n_traj, t, c, h, w)
    return [Trajectory(arr[i].copy(), family) for i in range(n_traj)]


def read_meta(path) -> dict:
    side = Path(path).with_suffix(Path(path).suffix + ".meta.json")
    if not side.exists():
        return {}
    return json.loads(side.read_text())
