"""Checkpoint container: magic "NSTR", u16 version, u32 header length, a
JSON header (model config, tensor manifest with names/shapes/offsets, seed
state, optimizer scalars), a raw little-endian float64 payload, and a
trailing CRC32 of the payload.

The manifest covers model parameters plus, when present, the Adam moments
(``optim.m.<name>`` / ``optim.v.<name>``). Loading reproduces arrays bit
for bit, so a reloaded model forwards identically.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as model_mod
from .errors import DataError
from .model import ModelConfig, ModelParams
from .optim import AdamConfig, OptimState

_MAGIC = b"NSTR"
_VERSION = 1


def save_checkpoint(
    params: ModelParams,
    optim: Optional[OptimState],
    cfg: ModelConfig,
    seed_state: dict,
    path,
) -> None:
    named = dict(model_mod.flatten_params(params))
    tensors: list[tuple[str, np.ndarray]] = list(named.items())
    if optim is not None:
        tensors += [(f"optim.m.{k}", a) for k, a in optim.m.items()]
        tensors += [(f"optim.v.{k}", a) for k, a in optim.v.items()]

    manifest = []
    offset = 0
    chunks = []
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)

    header = {
        "config": cfg.to_dict(),
        "manifest": manifest,
        "seed_state": seed_state,
        "optim": None
        if optim is None
        else {"t": optim.t, "hyper": dataclasses.asdict(optim.hyper)},
    }
    header_bytes = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_header(path) -> dict:
    blob = Path(path).read_bytes()
    if len(blob) < 10:
        raise DataError(f"{path}: truncated checkpoint")
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 10 + hlen + 4:
        raise DataError(f"{path}: truncated header")
    header = json.loads(blob[10 : 10 + hlen])
    header["_payload"] = blob[10 + hlen : -4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if crc != zlib.crc32(header["_payload"]):
        raise DataError(f"{path}: payload CRC mismatch")
    return header


def load_checkpoint(path):
    """Returns (params, optim or None, config, seed_state)."""
    header = read_header(path)
    payload = header.pop("_payload")
    cfg = ModelConfig.from_dict(header["config"])

    arrays: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * n
        if end > len(payload):
            raise DataError(f"{path}: manifest entry {entry['name']} beyond payload")
        arrays[entry["name"]] = (
            np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
        )

    template = model_mod.init_model_params(cfg, np.random.default_rng(0))
    names = [n for n, _ in model_mod.flatten_params(template)]
    missing = [n for n in names if n not in arrays]
    if missing:
        raise DataError(f"{path}: checkpoint missing tensors {missing[:3]}...")
    params = model_mod.unflatten_params(template, [arrays[n] for n in names])

    optim = None
    if header.get("optim"):
        hyper = AdamConfig(**header["optim"]["hyper"])
        optim = OptimState(
            hyper=hyper,
            m={n: arrays[f"optim.m.{n}"] for n in names},
            v={n: arrays[f"optim.v.{n}"] for n in names},
            t=int(header["optim"]["t"]),
        )
    return params, optim, cfg, header.get("seed_state", {})
