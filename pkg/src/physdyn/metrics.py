"""Per-frame trajectory metrics: voxel IoU, Chamfer distance, correspondence L2."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_VOXEL_RESOLUTION = 32


def _cloud(points, name: str) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return arr


def viou(pred, gt, resolution: int = DEFAULT_VOXEL_RESOLUTION, padding: float = 0.05) -> float:
    """IoU of voxel occupancy over the union bounding box grown by ``padding``
    of its extent on every side.

    The box is split into ``resolution`` voxels per axis (voxels may be
    anisotropic).
    """
    a, b = _cloud(pred, "pred"), _cloud(gt, "gt")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    both = np.concatenate([a, b])
    lo, hi = both.min(axis=0), both.max(axis=0)
    extent = hi - lo
    extent = np.where(extent > 0, extent, max(extent.max(), 1e-9))
    lo = lo - padding * extent
    size = extent * (1.0 + 2.0 * padding)

    def occupied(p):
        idx = np.clip(np.floor((p - lo) / size * resolution).astype(np.int64), 0, resolution - 1)
        return set(map(tuple, np.unique(idx, axis=0)))

    va, vb = occupied(a), occupied(b)
    return len(va & vb) / len(va | vb)


def chamfer(pred, gt) -> float:
    """Symmetric Chamfer distance: mean of the two directed mean NN distances."""
    a, b = _cloud(pred, "pred"), _cloud(gt, "gt")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def corr_l2(pred, gt) -> float:
    """Mean Euclidean distance between corresponding points."""
    a, b = _cloud(pred, "pred"), _cloud(gt, "gt")
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=1).mean())


def evaluate_sequence(pred, gt, resolution: int = DEFAULT_VOXEL_RESOLUTION) -> dict:
    """Average vIoU, CD and L2 over frames of ``(F, N, 3)`` sequences."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 3 or gt.ndim != 3 or pred.shape[0] != gt.shape[0]:
        raise ValueError(f"expected matching (F, N, 3) sequences, got {pred.shape} and {gt.shape}")
    per_frame = [(viou(p, g, resolution), chamfer(p, g), corr_l2(p, g)) for p, g in zip(pred, gt)]
    v, c, l2 = np.mean(per_frame, axis=0)
    return {"viou": float(v), "chamfer": float(c), "l2": float(l2)}
