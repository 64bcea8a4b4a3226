"""Training losses for predicted trajectories (torch, differentiable).

Tensors follow ``(..., F, N, 3)`` for positions, where frame index 0 of the
array is simulated frame 1 unless stated otherwise. Leading batch dimensions
are allowed everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .core import VERTICAL_AXIS


@dataclass(frozen=True)
class LossWeights:
    velocity: float = 1.0
    physics: float = 0.1
    floor: float = 1.0

    def __post_init__(self):
        for name in ("velocity", "physics", "floor"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")


def _tensor(x, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def diffusion_loss(pred, target) -> torch.Tensor:
    pred, target = _tensor(pred), _tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def velocity_loss(pred, target) -> torch.Tensor:
    """Mean squared mismatch of frame-to-frame displacements."""
    pred, target = _tensor(pred), _tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.ndim < 3 or pred.shape[-3] < 2:
        raise ValueError("velocity loss needs at least 2 frames")
    d_pred = pred[..., 1:, :, :] - pred[..., :-1, :, :]
    d_true = target[..., 1:, :, :] - target[..., :-1, :, :]
    return torch.mean((d_true - d_pred) ** 2)


def floor_loss(pred, floor_height) -> torch.Tensor:
    """``(1/N) sum_f sum_p max(h - y, 0)^2``, averaged over leading batch dims.

    There is deliberately no ``1/F`` factor.
    """
    pred = _tensor(pred)
    h = _tensor(floor_height, pred)
    n = pred.shape[-2]
    h = h.reshape(h.shape + (1, 1)) if h.ndim else h
    depth = torch.clamp(h - pred[..., VERTICAL_AXIS], min=0.0)
    per_item = (depth ** 2).sum(dim=(-2, -1)) / n
    return per_item.mean()


# ---------------------------------------------------------------------------
# grid velocity approximation and the deformation-gradient consistency loss


_OFFSETS = torch.tensor([[a, b, c] for a in range(3) for b in range(3) for c in range(3)])


def bspline_weights(x: torch.Tensor, resolution: int):
    """Quadratic B-spline stencil of points ``x`` ``(M, 3)``.

    Returns flat node indices ``(M, 27)``, weights ``(M, 27)``, weight
    gradients ``(M, 27, 3)`` and offsets ``x_i - x`` ``(M, 27, 3)``. Points
    outside the domain use the nearest valid stencil (weights extrapolate).
    """
    dx = 1.0 / resolution
    xs = x / dx
    base = torch.clamp(torch.floor(xs.detach() - 0.5), 0, resolution - 2)
    fx = xs - base
    w = torch.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], dim=-1)
    dw = torch.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5], dim=-1) / dx
    a, b, c = _OFFSETS[:, 0], _OFFSETS[:, 1], _OFFSETS[:, 2]
    wx, wy, wz = w[:, 0, a], w[:, 1, b], w[:, 2, c]
    weight = wx * wy * wz
    grad = torch.stack([dw[:, 0, a] * wy * wz, wx * dw[:, 1, b] * wz, wx * wy * dw[:, 2, c]], dim=-1)
    node = base.long()[:, None, :] + _OFFSETS[None]
    n = resolution + 1
    index = (node[..., 0] * n + node[..., 1]) * n + node[..., 2]
    offset = node.to(x.dtype) * dx - x[:, None, :]
    return index, weight, grad, offset


def _grid_velocities(x, v, C, masses, group, resolution):
    """APIC-weighted node velocities for particles split into ``group``s.

    Particles of different groups never share nodes. Returns the per-particle
    stencil plus the gathered node velocities ``(M, 27, 3)``.
    """
    index, weight, grad, offset = bspline_weights(x, resolution)
    key = group[:, None] * (resolution + 1) ** 3 + index
    nodes, local = torch.unique(key, return_inverse=True)
    wm = weight * masses[:, None]
    mom = wm[..., None] * (v[:, None, :] + offset @ C.transpose(-1, -2))
    size = len(nodes)
    node_mass = torch.zeros(size, dtype=x.dtype).index_add_(0, local.reshape(-1), wm.reshape(-1))
    node_mom = torch.zeros(size, 3, dtype=x.dtype).index_add_(0, local.reshape(-1), mom.reshape(-1, 3))
    occupied = node_mass > 1e-12 * node_mass.max()
    safe = torch.where(occupied, node_mass, torch.ones_like(node_mass))
    node_vel = torch.where(occupied[:, None], node_mom / safe[:, None], torch.zeros_like(node_mom))
    return nodes, node_vel, node_vel[local], grad


def grid_velocity_approx(positions, affines, masses, resolution: int, frame_dt: float, frame: int):
    """Node velocities at ``frame + 1`` from predicted positions.

    ``positions`` and ``affines`` are indexed by absolute frame number
    (``positions[f]`` is frame ``f``). Particle velocities are central
    differences ``(x[f+2] - x[f]) / (2 dT)``. Returns ``(nodes, velocities)``
    where ``nodes`` are flat node indices of the occupied nodes.
    """
    positions = _tensor(positions)
    affines = _tensor(affines, positions)
    last = positions.shape[0] - 1
    if not 0 <= frame <= last - 2:
        raise ValueError(f"frame {frame} needs frames up to {frame + 2}, only {last} available")
    m = _tensor(masses, positions) if masses is not None else torch.ones(positions.shape[1], dtype=positions.dtype)
    x = positions[frame]
    v = (positions[frame + 2] - positions[frame]) / (2.0 * frame_dt)
    group = torch.zeros(x.shape[0], dtype=torch.long)
    nodes, node_vel, _, _ = _grid_velocities(x, v, affines[frame], m, group, resolution)
    return nodes, node_vel


def physics_loss(pred, def_grads, affines, masses=None, resolution: int = 48, frame_dt: float = 1.0 / 24.0):
    """Deformation-gradient consistency of predicted positions.

    ``pred`` holds frames 1..F ``(..., F, N, 3)``; ``def_grads`` and
    ``affines`` the ground-truth F_p and C_p of the same frames. Computes
    ``1/(N(F-2)) sum_{f=1}^{F-2} sum_p ||F^{f+1} - g(x^f) F^f||`` with the
    unsquared Frobenius norm, averaged over leading batch dims.
    """
    if def_grads is None or affines is None:
        raise ValueError("physics loss requires ground-truth deformation gradients and affine matrices")
    pred = _tensor(pred)
    Fg = _tensor(def_grads, pred)
    Cg = _tensor(affines, pred)
    if pred.ndim == 3:
        pred, Fg, Cg = pred[None], Fg[None], Cg[None]
        if masses is not None:
            masses = _tensor(masses, pred)[None]
    batch, nframes, n = pred.shape[:3]
    if nframes < 3:
        raise ValueError("physics loss needs at least 3 frames")
    if masses is None:
        m = torch.ones(batch, n, dtype=pred.dtype)
    else:
        m = _tensor(masses, pred).expand(batch, n)
    k = nframes - 2
    # array index j corresponds to frame f = j + 1, j = 0..F-3
    x = pred[:, :k].reshape(-1, 3)
    v = ((pred[:, 2:] - pred[:, :k]) / (2.0 * frame_dt)).reshape(-1, 3)
    C = Cg[:, :k].reshape(-1, 3, 3)
    mm = m[:, None, :].expand(batch, k, n).reshape(-1)
    group = torch.arange(batch * k).repeat_interleave(n)
    _, _, vi, grad = _grid_velocities(x, v, C, mm, group, resolution)
    g = torch.eye(3, dtype=pred.dtype) + frame_dt * (vi.transpose(-1, -2) @ grad)
    resid = Fg[:, 1:k + 1].reshape(-1, 3, 3) - g @ Fg[:, :k].reshape(-1, 3, 3)
    norms = torch.linalg.norm(resid.reshape(-1, 9), dim=-1).reshape(batch, k * n)
    return (norms.sum(dim=-1) / (n * k)).mean()


@dataclass
class LossAux:
    """Ground-truth side information for a batch ``(B, F, N, ...)``."""

    floor_height: torch.Tensor
    def_grads: Optional[torch.Tensor] = None
    affines: Optional[torch.Tensor] = None
    masses: Optional[torch.Tensor] = None
    has_physics: Optional[torch.Tensor] = None
    resolution: int = 48
    frame_dt: float = 1.0 / 24.0


def total_loss(pred, target, aux: LossAux, weights: LossWeights = LossWeights()):
    """Weighted sum of the four losses; returns ``(total, terms)``.

    The physics term only covers batch items flagged in ``aux.has_physics``
    (MPM materials) and is skipped entirely when its weight is zero.
    """
    pred, target = _tensor(pred), _tensor(target, _tensor(pred))
    terms = {"diffusion": diffusion_loss(pred, target)}
    zero = pred.new_zeros(())
    terms["velocity"] = velocity_loss(pred, target) if weights.velocity > 0 else zero
    terms["floor"] = floor_loss(pred, aux.floor_height) if weights.floor > 0 else zero
    phys = zero
    if weights.physics > 0 and aux.def_grads is not None:
        batched = pred.ndim == 4
        mask = aux.has_physics
        if mask is None:
            mask = torch.ones(pred.shape[0] if batched else 1, dtype=torch.bool)
        if bool(mask.any()):
            if batched:
                sel = mask.nonzero().flatten()
                masses = aux.masses[sel] if aux.masses is not None else None
                phys = physics_loss(pred[sel], aux.def_grads[sel], aux.affines[sel], masses, aux.resolution,
                                    aux.frame_dt)
            else:
                phys = physics_loss(pred, aux.def_grads, aux.affines, aux.masses, aux.resolution, aux.frame_dt)
    terms["physics"] = phys
    total = (terms["diffusion"] + weights.velocity * terms["velocity"] + weights.physics * terms["physics"]
             + weights.floor * terms["floor"])
    return total, terms
