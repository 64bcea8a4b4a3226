"""PDMC model checkpoints.

Layout (little-endian)::

    b"PDMC"  u32 version=1
    u32 config_len  config_len bytes of UTF-8 JSON (ModelConfig fields)
    u32 num_blocks
    per block: u16 name_len, name (UTF-8), u8 ndim, ndim x u32 shape,
               u64 count, count x f32 values (row-major)

Blocks are the model's ``state_dict`` entries in their registration order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, TrajectoryDiffusion, model_config_dict

MAGIC = b"PDMC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(model: TrajectoryDiffusion) -> bytes:
    cfg = json.dumps(model_config_dict(model.cfg), sort_keys=True).encode()
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, dtype=torch.float32) -> TrajectoryDiffusion:
    pos = 0

    def take(size: int, what: str) -> bytes:
        nonlocal pos
        if pos + size > len(buf):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        chunk = buf[pos:pos + size]
        pos += size
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("not a PDMC checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported PDMC version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        cfg = ModelConfig(**json.loads(take(cfg_len, "config").decode()))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"invalid model config: {e}") from e
    (count,) = struct.unpack("<I", take(4, "block count"))
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        (size,) = struct.unpack("<Q", take(8, f"{name} length"))
        if size != int(np.prod(shape)):
            raise CheckpointError(f"block {name}: length {size} does not match shape {shape}")
        values = np.frombuffer(take(4 * size, name), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(values.copy()).to(dtype)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last block")
    model = TrajectoryDiffusion(cfg).to(dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"parameters do not match the stored config: {e}") from e
    model.eval()
    return model


def save_checkpoint(path, model: TrajectoryDiffusion) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path, dtype=torch.float32) -> TrajectoryDiffusion:
    return decode_checkpoint(Path(path).read_bytes(), dtype)
