"""PTRJ binary trajectory files.

Layout (little-endian)::

    b"PTRJ"  u32 version=1
    u32 N  u32 F  u8 material  u8 flags  u16 pad        flags bit0: has F/C
    11 x f32 condition: force[3] drag[3] E nu h frame_dt reserved
    f32 positions[(F + 1) * N * 3]                      frame 0 first
    f32 def_grads[F * N * 9]  f32 affines[F * N * 9]     only when bit0 set

Matrices are row-major.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import Material, PhysicsCondition, TrajectorySequence

MAGIC = b"PTRJ"
VERSION = 1
_HEADER = struct.Struct("<4sIIIBBH")
_COND = struct.Struct("<11f")
HAS_DEFORMATION = 0x1


class TrajectoryFormatError(ValueError):
    code = "format"


class MagicMismatchError(TrajectoryFormatError):
    code = "magic-mismatch"


class VersionMismatchError(TrajectoryFormatError):
    code = "version-mismatch"


class TruncatedFileError(TrajectoryFormatError):
    code = "truncated"

    def __init__(self, section: str, expected: int, available: int):
        super().__init__(f"file truncated in section '{section}': need {expected} bytes, {available} available")
        self.section = section


def encode_trajectory(traj: TrajectorySequence, cond: PhysicsCondition) -> bytes:
    n, f = traj.num_points, traj.num_frames
    has_def = traj.def_grads is not None and traj.affines is not None
    parts = [
        _HEADER.pack(MAGIC, VERSION, n, f, int(cond.material), HAS_DEFORMATION if has_def else 0, 0),
        _COND.pack(*cond.force, *cond.drag_point, cond.youngs_modulus, cond.poisson_ratio,
                   cond.floor_height, traj.frame_dt, 0.0),
        np.ascontiguousarray(traj.all_frames(), dtype="<f4").tobytes(),
    ]
    if has_def:
        parts.append(np.ascontiguousarray(traj.def_grads, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(traj.affines, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_trajectory(buf: bytes) -> tuple[TrajectorySequence, PhysicsCondition]:
    pos = 0

    def take(size: int, section: str) -> bytes:
        nonlocal pos
        if pos + size > len(buf):
            raise TruncatedFileError(section, size, len(buf) - pos)
        chunk = buf[pos:pos + size]
        pos += size
        return chunk

    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    magic, version, n, f, material, flags, _ = _HEADER.unpack(take(_HEADER.size, "header"))
    if version != VERSION:
        raise VersionMismatchError(f"unsupported PTRJ version {version}, expected {VERSION}")
    values = _COND.unpack(take(_COND.size, "condition"))
    positions = np.frombuffer(take(4 * (f + 1) * n * 3, "positions"), dtype="<f4").reshape(f + 1, n, 3)
    def_grads = affines = None
    if flags & HAS_DEFORMATION:
        def_grads = np.frombuffer(take(4 * f * n * 9, "def_grads"), dtype="<f4").reshape(f, n, 3, 3)
        affines = np.frombuffer(take(4 * f * n * 9, "affines"), dtype="<f4").reshape(f, n, 3, 3)
    cond = PhysicsCondition(
        force=values[0:3], drag_point=values[3:6], youngs_modulus=values[6], poisson_ratio=values[7],
        floor_height=values[8], material=Material(material),
    )
    traj = TrajectorySequence(positions[0].copy(), positions[1:].copy(), float(values[9]),
                              None if def_grads is None else def_grads.copy(),
                              None if affines is None else affines.copy())
    return traj, cond


def write_trajectory(path, traj: TrajectorySequence, cond: PhysicsCondition) -> None:
    Path(path).write_bytes(encode_trajectory(traj, cond))


def read_trajectory(path) -> tuple[TrajectorySequence, PhysicsCondition]:
    return decode_trajectory(Path(path).read_bytes())
