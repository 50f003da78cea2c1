# app/services/checkpoint.py
"""
Checkpoint container.

Layout (little-endian):
    b"PHSK" | u32 version | u64 header length | header JSON (utf-8) | tensor payload

The header holds the kind ("autoencoder" or "denoiser"), the full config,
the step counter, free-form metadata, a sha256 of the payload and a
table of {name, shape, offset} for float64 tensors packed in the payload.
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from app.core.diffusion import Denoiser, LatentStats, init_denoiser
from app.core.exceptions import CheckpointError
from app.core.funphase import init_weights
from app.core.layers import ParameterSet
from app.core.optim import AdamWState
from app.schemas.config import DiffusionConfig, ModelConfig

MAGIC = b"PHSK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    kind: str
    config: Dict[str, Any]
    arrays: Dict[str, np.ndarray]
    step: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)


def write_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    table, chunks, offset = [], [], 0
    for name in sorted(checkpoint.arrays):
        data = np.ascontiguousarray(checkpoint.arrays[name], dtype="<f8")
        table.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    payload = b"".join(chunks)
    header = {
        "kind": checkpoint.kind,
        "config": checkpoint.config,
        "step": checkpoint.step,
        "meta": checkpoint.meta,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + payload)


def read_checkpoint(path: str) -> Checkpoint:
    file = Path(path)
    if not file.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = file.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path} is too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + header_len
    if start > len(raw):
        raise CheckpointError(f"{path} is truncated inside its header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = raw[start:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path} payload checksum mismatch")

    arrays = {}
    try:
        for entry in header["tensors"]:
            shape = tuple(int(s) for s in entry["shape"])
            end = entry["offset"] + 8 * int(np.prod(shape))
            if end > len(payload):
                raise CheckpointError(f"tensor '{entry['name']}' runs past the end of the payload")
            arrays[entry["name"]] = np.frombuffer(payload[entry["offset"]:end], dtype="<f8").reshape(shape).copy()
        return Checkpoint(kind=header["kind"], config=header["config"], arrays=arrays,
                          step=int(header.get("step", 0)), meta=header.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc!r}") from None


# ============================================================================
# Autoencoder / denoiser bundles
# ============================================================================

def _pack_optimizer(state: Optional[AdamWState]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if state is None:
        return {}, {}
    arrays = {f"opt.m.{k}": v for k, v in state.m.items()}
    arrays.update({f"opt.v.{k}": v for k, v in state.v.items()})
    return arrays, {"optimizer_step": state.step}


def _unpack_optimizer(arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> Optional[AdamWState]:
    if "optimizer_step" not in meta:
        return None
    m = {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")}
    v = {k[len("opt.v."):]: v for k, v in arrays.items() if k.startswith("opt.v.")}
    return AdamWState(step=int(meta["optimizer_step"]), m=m, v=v)


def _weights(arrays: Dict[str, np.ndarray], init: ParameterSet) -> ParameterSet:
    names = {k[len("w."):]: v for k, v in arrays.items() if k.startswith("w.")}
    return init.load_arrays(names)


def save_autoencoder(path: str, weights: ParameterSet, config: ModelConfig,
                     optimizer_state: Optional[AdamWState] = None, step: int = 0) -> None:
    arrays = {f"w.{k}": v for k, v in weights.arrays().items()}
    opt_arrays, meta = _pack_optimizer(optimizer_state)
    arrays.update(opt_arrays)
    write_checkpoint(path, Checkpoint(kind="autoencoder", config=config.model_dump(mode="json"),
                                      arrays=arrays, step=step, meta=meta))


def load_autoencoder(path: str) -> Tuple[ParameterSet, ModelConfig, Optional[AdamWState], int]:
    ckpt = read_checkpoint(path)
    if ckpt.kind != "autoencoder":
        raise CheckpointError(f"{path} holds a {ckpt.kind} checkpoint, expected an autoencoder")
    try:
        config = ModelConfig(**ckpt.config)
    except ValidationError as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc.errors()[0]['msg']}") from None
    weights = _weights(ckpt.arrays, init_weights(config))
    return weights, config, _unpack_optimizer(ckpt.arrays, ckpt.meta), ckpt.step


def save_denoiser(path: str, denoiser: Denoiser, optimizer_state: Optional[AdamWState] = None,
                  step: int = 0) -> None:
    arrays = {f"w.{k}": v for k, v in denoiser.weights.arrays().items()}
    arrays["stats.mean"] = denoiser.stats.mean
    arrays["stats.std"] = denoiser.stats.std
    opt_arrays, meta = _pack_optimizer(optimizer_state)
    arrays.update(opt_arrays)
    meta.update({"channels": denoiser.channels, "f_max": denoiser.f_max, "window_sec": denoiser.window_sec})
    write_checkpoint(path, Checkpoint(kind="denoiser", config=denoiser.config.model_dump(mode="json"),
                                      arrays=arrays, step=step, meta=meta))


def load_denoiser(path: str) -> Tuple[Denoiser, Optional[AdamWState], int]:
    ckpt = read_checkpoint(path)
    if ckpt.kind != "denoiser":
        raise CheckpointError(f"{path} holds a {ckpt.kind} checkpoint, expected a denoiser")
    try:
        config = DiffusionConfig(**ckpt.config)
        channels = int(ckpt.meta["channels"])
        f_max, window = float(ckpt.meta["f_max"]), float(ckpt.meta["window_sec"])
        stats = LatentStats(mean=ckpt.arrays["stats.mean"], std=ckpt.arrays["stats.std"])
    except ValidationError as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc.errors()[0]['msg']}") from None
    except KeyError as exc:
        raise CheckpointError(f"denoiser checkpoint is missing {exc}") from None
    weights = _weights(ckpt.arrays, init_denoiser(config, channels))
    denoiser = Denoiser(weights=weights, config=config, stats=stats, channels=channels,
                        f_max=f_max, window_sec=window)
    return denoiser, _unpack_optimizer(ckpt.arrays, ckpt.meta), ckpt.step
