"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"TSCK" | u32 version
    u32 n | n bytes   architecture descriptor (utf-8)
    u32 n | n bytes   metadata, canonical JSON (utf-8)
    u32 count
    count x [ u16 n | name | u8 ndim | ndim x u32 dims | float32 data ]

Entry names are ``param/<name>``, ``buffer/<name>`` and, when optimizer
state is kept, ``adam.m/<name>`` and ``adam.v/<name>``. All arrays are
stored as float32, so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn_engine import OptimizerState
from .pointnet_models import ArchitectureSpec, PointNetModel, build_model

MAGIC = b"TSCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class ModelCheckpoint:
    spec: ArchitectureSpec
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def checkpoint_from_model(model: PointNetModel, metadata: dict | None = None,
                          optimizer: OptimizerState | None = None) -> ModelCheckpoint:
    tensors = {f"param/{k}": v.data.astype(np.float32) for k, v in model.parameters().items()}
    tensors.update({f"buffer/{k}": v.astype(np.float32) for k, v in model.buffers().items()})
    meta = dict(metadata or {})
    if optimizer is not None:
        for k in model.parameters():
            if k in optimizer.m:
                tensors[f"adam.m/{k}"] = optimizer.m[k].astype(np.float32)
                tensors[f"adam.v/{k}"] = optimizer.v[k].astype(np.float32)
        meta["optimizer"] = {"lr": optimizer.lr, "step": optimizer.step,
                             "best_loss": optimizer.best_loss, "bad_epochs": optimizer.bad_epochs}
    return ModelCheckpoint(model.spec, tensors, meta)


def model_from_checkpoint(ckpt: ModelCheckpoint, dtype=np.float32) -> PointNetModel:
    """Rebuild the network and load weights and running statistics (eval mode)."""
    model = build_model(ckpt.spec, dtype=dtype)
    for kind, table in (("param", {k: p.data for k, p in model.parameters().items()}),
                        ("buffer", model.buffers())):
        for name, target in table.items():
            key = f"{kind}/{name}"
            if key not in ckpt.tensors:
                raise CheckpointError(f"checkpoint lacks {key}")
            src = ckpt.tensors[key]
            if src.shape != target.shape:
                raise CheckpointError(f"{key}: shape {src.shape}, architecture expects {target.shape}")
            target[...] = src
    return model.eval()


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for text in (ckpt.spec.descriptor(),
                 json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":"))):
        raw = text.encode()
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
    out.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> ModelCheckpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    spec = ArchitectureSpec.from_descriptor(take_bytes(take("<I")[0]).decode())
    metadata = json.loads(take_bytes(take("<I")[0]).decode())
    tensors = {}
    for _ in range(take("<I")[0]):
        name = take_bytes(take("<H")[0]).decode()
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take_bytes(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float32)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return ModelCheckpoint(spec, tensors, metadata)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> ModelCheckpoint:
    return decode_checkpoint(Path(path).read_bytes())
