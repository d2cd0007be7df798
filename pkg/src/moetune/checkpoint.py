"""Checkpoint container: one JSON header line, then little-endian float32 arrays.

Header keys: ``format_version``, ``model_config``, ``kind`` (dense|moe),
``manifest`` (name -> {shape, offset}, offsets relative to the first byte
after the header newline), plus training metadata.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, get_dtype
from .model import DenseTransformer, ModelConfig, MoETransformer

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: DenseTransformer
    step: int = 0
    stage: str | None = None
    train_config: dict | None = None
    rng_state: dict | None = None
    optimizer: dict | None = None  # {"t": int, "m": {name: arr}, "v": {name: arr}}
    extra: dict = field(default_factory=dict)


def _arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in ckpt.model.params.items()}
    if ckpt.optimizer:
        for slot in ("m", "v"):
            for name, arr in ckpt.optimizer[slot].items():
                arrays[f"optim.{slot}/{name}"] = arr
    return arrays


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    model = ckpt.model
    arrays = _arrays(ckpt)
    manifest, offset = {}, 0
    for name, arr in arrays.items():
        manifest[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size * _LE_F32.itemsize
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "moe" if model.is_moe else "dense",
        "model_config": model.config.to_dict(),
        "frozen": [n for n, f in getattr(model, "freeze_mask", {}).items() if f],
        "step": ckpt.step,
        "stage": ckpt.stage,
        "train_config": ckpt.train_config,
        "rng_state": ckpt.rng_state,
        "optimizer_t": ckpt.optimizer["t"] if ckpt.optimizer else None,
        "extra": ckpt.extra,
        "data_bytes": offset,
        "manifest": manifest,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    os.replace(tmp, path)
    return path


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        line = fh.readline()
    if not line.endswith(b"\n"):
        raise CheckpointError(f"{path}: missing header terminator")
    try:
        header = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if not isinstance(header, dict) or "format_version" not in header:
        raise CheckpointError(f"{path}: corrupt header")
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format_version {header['format_version']} (expected {FORMAT_VERSION})")
    return header, len(line)


def load_checkpoint(path) -> Checkpoint:
    header, start = read_header(path)
    raw = Path(path).read_bytes()[start:]
    if len(raw) < header["data_bytes"]:
        raise CheckpointError(f"{path}: truncated ({len(raw)} of {header['data_bytes']} data bytes)")
    cfg = ModelConfig.from_dict(header["model_config"])
    cls = MoETransformer if header["kind"] == "moe" else DenseTransformer
    expected = cls(cfg, params={}).param_shapes()
    manifest = header["manifest"]
    arrays = {}
    for name, entry in manifest.items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        lo = entry["offset"]
        chunk = raw[lo: lo + n * _LE_F32.itemsize]
        if len(chunk) != n * _LE_F32.itemsize:
            raise CheckpointError(f"{path}: truncated array {name}")
        arrays[name] = np.frombuffer(chunk, dtype=_LE_F32).reshape(shape)
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: manifest lacks parameter {name}")
        if tuple(arrays[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, config implies {shape}")
    dtype = get_dtype()
    params = {n: Tensor(arrays[n].astype(dtype), requires_grad=True, name=n) for n in expected}
    if cls is MoETransformer:
        frozen = set(header.get("frozen", []))
        model = MoETransformer(cfg, params=params, freeze_mask={n: n in frozen for n in params})
    else:
        model = DenseTransformer(cfg, params=params)
    optimizer = None
    if header.get("optimizer_t") is not None:
        optimizer = {"t": header["optimizer_t"], "m": {}, "v": {}}
        for name, arr in arrays.items():
            if name.startswith("optim."):
                slot, pname = name[len("optim."):].split("/", 1)
                optimizer[slot][pname] = arr.astype(dtype)
    return Checkpoint(
        model=model,
        step=header.get("step", 0),
        stage=header.get("stage"),
        train_config=header.get("train_config"),
        rng_state=header.get("rng_state"),
        optimizer=optimizer,
        extra=header.get("extra") or {},
    )


def save_model(path, model: DenseTransformer) -> Path:
    return save_checkpoint(path, Checkpoint(model))


def load_model(path) -> DenseTransformer:
    return load_checkpoint(path).model
