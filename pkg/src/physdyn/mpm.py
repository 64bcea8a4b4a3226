"""Explicit MPM with APIC transfers and quadratic B-spline kernels.

Units: the unit cube is one metre, densities are kg/m^3, stresses Pa. The
grid has ``resolution + 1`` nodes per axis at ``i * dx`` with
``dx = 1 / resolution``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import VERTICAL_AXIS, Material, PhysicsCondition, TrajectorySequence, as_points

log = logging.getLogger(__name__)

STANDARD_GRAVITY = 9.8


class SimulationError(RuntimeError):
    def __init__(self, message: str, frame: Optional[int] = None, substep: Optional[int] = None):
        where = []
        if frame is not None:
            where.append(f"frame {frame}")
        if substep is not None:
            where.append(f"substep {substep}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))
        self.frame = frame
        self.substep = substep


class DomainExitError(SimulationError):
    def __init__(self, particle: int, position, frame=None, substep=None):
        super().__init__(f"particle {particle} left the simulation domain at {np.round(position, 4).tolist()}",
                         frame, substep)
        self.particle = particle


class StabilityError(SimulationError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    When ``substeps_per_frame`` is None it is derived from the CFL bound
    ``dt <= cfl * dx / c`` using the material's P-wave speed.
    """

    resolution: int = 48
    frame_dt: float = 1.0 / 24.0
    substeps_per_frame: Optional[int] = None
    gravity: tuple = (0.0, -9.8, 0.0)
    floor_friction: float = 0.4
    density: float = 1000.0
    mass_eps: float = 1e-12
    margin: float = 0.1
    force_region_radius: float = 0.1
    force_active_fraction: float = 1.0
    plasticine_compression: float = 0.1
    plasticine_stretch: float = 0.1
    sand_friction_angle: float = 35.0
    cfl: float = 0.5
    boundary_cells: int = 2

    @property
    def dx(self) -> float:
        return 1.0 / self.resolution

    def wave_speed(self, youngs_modulus: float, poisson_ratio: float) -> float:
        # sqrt(E / rho_eff) with rho_eff chosen so E / rho_eff = (lambda + 2 mu) / rho
        nu = poisson_ratio
        rho_eff = self.density * (1 + nu) * (1 - 2 * nu) / (1 - nu)
        return math.sqrt(youngs_modulus / rho_eff)

    def max_stable_dt(self, youngs_modulus: float, poisson_ratio: float) -> float:
        return self.cfl * self.dx / self.wave_speed(youngs_modulus, poisson_ratio)

    def substeps_for(self, youngs_modulus: float, poisson_ratio: float) -> int:
        if self.substeps_per_frame is not None:
            return int(self.substeps_per_frame)
        return max(1, math.ceil(self.frame_dt / self.max_stable_dt(youngs_modulus, poisson_ratio) - 1e-9))

    def replace(self, **changes) -> "SimConfig":
        return replace(self, **changes)


@dataclass
class MaterialParams:
    mu: float
    lam: float
    material: Material = Material.ELASTIC
    plasticine_compression: float = 0.1
    plasticine_stretch: float = 0.1
    sand_friction_angle: float = 35.0

    @classmethod
    def from_condition(cls, cond: PhysicsCondition, cfg: SimConfig) -> "MaterialParams":
        mu, lam = lame_params(cond.youngs_modulus, cond.poisson_ratio)
        return cls(mu, lam, cond.material, cfg.plasticine_compression, cfg.plasticine_stretch,
                   cfg.sand_friction_angle)


@dataclass
class MPMState:
    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray
    mass: np.ndarray
    vol0: np.ndarray
    params: MaterialParams
    plastic_J: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.plastic_J is None:
            self.plastic_J = np.ones(len(self.x))

    @classmethod
    def at_rest(cls, x, mass, vol0, params: MaterialParams) -> "MPMState":
        x = as_points(x).copy()
        n = len(x)
        return cls(
            x=x,
            v=np.zeros((n, 3)),
            F=np.tile(np.eye(3), (n, 1, 1)),
            C=np.zeros((n, 3, 3)),
            mass=np.broadcast_to(np.asarray(mass, float), (n,)).copy(),
            vol0=np.broadcast_to(np.asarray(vol0, float), (n,)).copy(),
            params=params,
        )

    def copy(self) -> "MPMState":
        return MPMState(self.x.copy(), self.v.copy(), self.F.copy(), self.C.copy(), self.mass.copy(),
                        self.vol0.copy(), self.params, self.plastic_J.copy())


@dataclass
class Grid:
    """Sparse background grid: only nodes touched by some particle are stored.

    ``nodes`` holds the flat indices ``(i * n + j) * n + k`` of the active
    nodes (sorted); ``mass``, ``momentum`` and ``velocity`` are aligned with it.
    """

    resolution: int
    nodes: np.ndarray
    mass: np.ndarray
    momentum: np.ndarray
    velocity: Optional[np.ndarray] = None

    @property
    def dx(self) -> float:
        return 1.0 / self.resolution

    @property
    def nodes_per_axis(self) -> int:
        return self.resolution + 1

    def node_positions(self) -> np.ndarray:
        n = self.nodes_per_axis
        ijk = np.stack([self.nodes // (n * n), (self.nodes // n) % n, self.nodes % n], axis=-1)
        return ijk * self.dx


# ---------------------------------------------------------------------------
# constitutive models


def lame_params(youngs_modulus: float, poisson_ratio: float) -> tuple[float, float]:
    E, nu = float(youngs_modulus), float(poisson_ratio)
    if not E > 0:
        raise ValueError(f"Young's modulus must be positive, got {E}")
    if not 0.0 <= nu < 0.5:
        raise ValueError(f"Poisson ratio must lie in [0, 0.5), got {nu}")
    return E / (2.0 * (1.0 + nu)), E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))


def polar_svd(F: np.ndarray):
    """SVD ``F = U diag(s) V^T`` with ``det U = det V = 1``.

    For inverted ``F`` the smallest singular value carries the sign.
    """
    U, s, Vt = np.linalg.svd(F)
    V = np.swapaxes(Vt, -1, -2)
    detU = np.linalg.det(U)
    detV = np.linalg.det(V)
    U = U.copy()
    V = V.copy()
    s = s.copy()
    flipU = detU < 0
    flipV = detV < 0
    U[flipU, :, 2] *= -1
    s[flipU] *= -1
    V[flipV, :, 2] *= -1
    s[flipV] *= -1
    return U, s, V


def fixed_corotated_energy(F, mu: float, lam: float) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    _, s, _ = polar_svd(F.reshape(-1, 3, 3))
    J = np.prod(s, axis=-1)
    psi = mu * np.sum((s - 1.0) ** 2, axis=-1) + 0.5 * lam * (J - 1.0) ** 2
    return psi.reshape(F.shape[:-2])


def hencky_energy(F, mu: float, lam: float) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    _, s, _ = polar_svd(F.reshape(-1, 3, 3))
    eps = np.log(s)
    psi = mu * np.sum(eps ** 2, axis=-1) + 0.5 * lam * np.sum(eps, axis=-1) ** 2
    return psi.reshape(F.shape[:-2])


def first_piola_stress(F, mu: float, lam: float, material: Material = Material.ELASTIC) -> np.ndarray:
    """dPsi/dF for a batch of deformation gradients ``(..., 3, 3)``.

    Elastic and plasticine use fixed-corotated elasticity,
    ``P = 2 mu (F - R) + lam (J - 1) J F^-T``. Sand uses the Hencky
    (log-strain) energy its return mapping is defined in.
    """
    F = np.asarray(F, dtype=np.float64)
    shape = F.shape
    Fb = F.reshape(-1, 3, 3)
    J = np.linalg.det(Fb)
    if np.any(J <= 0):
        bad = int(np.argmax(J <= 0))
        raise ValueError(f"deformation gradient {bad} has non-positive determinant {J[bad]:.3g}")
    U, s, V = polar_svd(Fb)
    if Material.parse(material) == Material.SAND:
        eps = np.log(s)
        ds = (2.0 * mu * eps + lam * eps.sum(axis=-1, keepdims=True)) / s
        P = np.einsum("nij,nj,nkj->nik", U, ds, V)
    else:
        R = U @ np.swapaxes(V, -1, -2)
        FinvT = np.swapaxes(np.linalg.inv(Fb), -1, -2)
        P = 2.0 * mu * (Fb - R) + (lam * (J - 1.0) * J)[:, None, None] * FinvT
    return P.reshape(shape)


def plastic_project(F, params: MaterialParams, return_plastic_det: bool = False):
    """Return-map trial deformation gradients onto the yield surface.

    Plasticine clamps singular values to ``[1 - compression, 1 + stretch]``.
    Sand applies the Drucker-Prager return mapping in log-strain space.
    Elastic input is returned unchanged.
    """
    F = np.asarray(F, dtype=np.float64)
    shape = F.shape
    Fb = F.reshape(-1, 3, 3)
    material = Material.parse(params.material)
    if material in (Material.ELASTIC, Material.RIGID):
        out = Fb.copy()
        jp = np.ones(len(Fb))
    else:
        U, s, V = polar_svd(Fb)
        if material == Material.PLASTICINE:
            s_new = np.clip(s, 1.0 - params.plasticine_compression, 1.0 + params.plasticine_stretch)
        else:
            s_new = _drucker_prager(s, params)
        out = np.einsum("nij,nj,nkj->nik", U, s_new, V)
        jp = np.prod(s, axis=-1) / np.prod(s_new, axis=-1)
    out = out.reshape(shape)
    if return_plastic_det:
        return out, jp.reshape(shape[:-2])
    return out


def _drucker_prager(s: np.ndarray, params: MaterialParams) -> np.ndarray:
    mu, lam = params.mu, params.lam
    sin_phi = math.sin(math.radians(params.sand_friction_angle))
    alpha = math.sqrt(2.0 / 3.0) * 2.0 * sin_phi / (3.0 - sin_phi)
    eps = np.log(np.maximum(s, 1e-12))
    tr = eps.sum(axis=-1, keepdims=True)
    dev = eps - tr / 3.0
    dev_norm = np.linalg.norm(dev, axis=-1, keepdims=True)
    dgamma = dev_norm + (3.0 * lam + 2.0 * mu) / (2.0 * mu) * tr * alpha
    with np.errstate(invalid="ignore", divide="ignore"):
        projected = eps - dgamma * dev / np.where(dev_norm > 0, dev_norm, 1.0)
    new_eps = np.where(dgamma <= 0, eps, projected)
    new_eps = np.where(tr > 0, 0.0, new_eps)
    return np.exp(new_eps)


# ---------------------------------------------------------------------------
# transfers


@dataclass
class Stencil:
    """Quadratic B-spline weights of each particle's 3x3x3 node neighbourhood."""

    index: np.ndarray  # (N, 27) flat node index
    weight: np.ndarray  # (N, 27)
    grad: np.ndarray  # (N, 27, 3) gradient of N_i at x_p
    offset: np.ndarray  # (N, 27, 3) x_i - x_p
    nodes: np.ndarray = None  # sorted unique flat indices
    local: np.ndarray = None  # (N, 27) position of each index in ``nodes``

    def __post_init__(self):
        if self.nodes is None:
            self.nodes, inverse = np.unique(self.index, return_inverse=True)
            self.local = inverse.reshape(self.index.shape)


_OFFSETS = np.array([[a, b, c] for a in range(3) for b in range(3) for c in range(3)])


def bspline_stencil(x: np.ndarray, resolution: int, frame: Optional[int] = None,
                    substep: Optional[int] = None) -> Stencil:
    dx = 1.0 / resolution
    xs = x / dx
    finite = np.all(np.isfinite(x), axis=1)
    base = np.floor(np.where(finite[:, None], xs, 0.0) - 0.5).astype(np.int64)
    outside = np.any((base < 0) | (base + 2 > resolution), axis=1) | ~finite
    if np.any(outside):
        p = int(np.argmax(outside))
        raise DomainExitError(p, x[p], frame, substep)
    fx = xs - base
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=-1)
    dw = np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5], axis=-1) / dx
    a, b, c = _OFFSETS[:, 0], _OFFSETS[:, 1], _OFFSETS[:, 2]
    wx, wy, wz = w[:, 0, a], w[:, 1, b], w[:, 2, c]
    weight = wx * wy * wz
    grad = np.stack([dw[:, 0, a] * wy * wz, wx * dw[:, 1, b] * wz, wx * wy * dw[:, 2, c]], axis=-1)
    node = base[:, None, :] + _OFFSETS[None]
    n = resolution + 1
    index = (node[..., 0] * n + node[..., 1]) * n + node[..., 2]
    offset = node * dx - x[:, None, :]
    return Stencil(index, weight, grad, offset)


def _scatter(local: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    # bincount accumulates in input order, so the sum is independent of threading
    flat = local.ravel()
    if values.ndim == local.ndim:
        return np.bincount(flat, weights=values.ravel(), minlength=size)
    vals = values.reshape(flat.size, -1)
    return np.stack([np.bincount(flat, weights=vals[:, k], minlength=size) for k in range(vals.shape[1])], axis=-1)


def p2g(state: MPMState, resolution: int, dt: float, external_force=None, stencil: Optional[Stencil] = None,
        frame: Optional[int] = None, substep: Optional[int] = None) -> Grid:
    """Scatter mass, APIC momentum, the stress impulse and external forces.

    ``external_force`` is a per-particle force in newtons ``(N, 3)``. With
    ``dt = 0`` only the mass and APIC momentum transfer remain.
    """
    st = stencil if stencil is not None else bspline_stencil(state.x, resolution, frame, substep)
    size = len(st.nodes)
    wm = st.weight * state.mass[:, None]
    node_mass = _scatter(st.local, wm, size)
    vel = state.v[:, None, :] + st.offset @ np.swapaxes(state.C, -1, -2)
    contrib = wm[..., None] * vel
    if dt != 0.0:
        P = first_piola_stress(state.F, state.params.mu, state.params.lam, state.params.material)
        K = state.vol0[:, None, None] * (P @ np.swapaxes(state.F, -1, -2))
        contrib = contrib - dt * (st.grad @ np.swapaxes(K, -1, -2))
        if external_force is not None:
            contrib = contrib + dt * st.weight[..., None] * np.asarray(external_force)[:, None, :]
    momentum = _scatter(st.local, contrib, size)
    return Grid(resolution, st.nodes, node_mass, momentum)


def grid_update(grid: Grid, dt: float, gravity=(0.0, 0.0, 0.0), floor_height: Optional[float] = None,
                friction: float = 0.0, mass_eps: float = 1e-12, boundary_cells: int = 0) -> Grid:
    """Momentum to velocity, gravity, floor contact and domain walls.

    Nodes lighter than ``mass_eps`` times the heaviest node are empty. Floor
    nodes (below ``h + dx``) moving downward lose their normal velocity and
    their tangential velocity is reduced by Coulomb friction. Nodes within
    ``boundary_cells`` of a domain face lose any outward velocity.
    """
    m = grid.mass
    occupied = m > mass_eps * (m.max() if m.size else 0.0)
    v = np.zeros_like(grid.momentum)
    v[occupied] = grid.momentum[occupied] / m[occupied, None]
    v[occupied] += dt * np.asarray(gravity, dtype=np.float64)

    nodes = grid.node_positions()
    dx = grid.dx
    if floor_height is not None:
        vn = v[:, VERTICAL_AXIS]
        contact = occupied & (nodes[:, VERTICAL_AXIS] < floor_height + dx) & (vn < 0)
        if np.any(contact):
            vt = v[contact].copy()
            vt[:, VERTICAL_AXIS] = 0.0
            speed_t = np.linalg.norm(vt, axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                scale = np.where(speed_t > 0, np.maximum(0.0, 1.0 - friction * np.abs(vn[contact]) / speed_t), 0.0)
            v[contact] = vt * scale[:, None]
    if boundary_cells > 0:
        lo = nodes < boundary_cells * dx
        hi = nodes > 1.0 - boundary_cells * dx
        v = np.where((lo & (v < 0)) | (hi & (v > 0)), 0.0, v)
    return Grid(grid.resolution, grid.nodes, grid.mass, grid.momentum, v)


def g2p(state: MPMState, grid: Grid, dt: float, stencil: Optional[Stencil] = None,
        frame: Optional[int] = None, substep: Optional[int] = None) -> MPMState:
    """Gather velocities and affine matrices, update F (with plasticity) and x."""
    if grid.velocity is None:
        raise ValueError("grid velocities missing; run grid_update first")
    st = stencil if stencil is not None else bspline_stencil(state.x, grid.resolution, frame, substep)
    if st.nodes is grid.nodes or np.array_equal(st.nodes, grid.nodes):
        vi = grid.velocity[st.local]
    else:
        pos = np.searchsorted(grid.nodes, st.index)
        pos = np.minimum(pos, len(grid.nodes) - 1)
        found = grid.nodes[pos] == st.index
        vi = np.where(found[..., None], grid.velocity[pos], 0.0)
    wvT = np.swapaxes(st.weight[..., None] * vi, -1, -2)  # (N, 3, 27)
    v = wvT.sum(axis=-1)
    C = (4.0 / grid.dx ** 2) * (wvT @ st.offset)
    grad_v = np.swapaxes(vi, -1, -2) @ st.grad
    F_trial = (np.eye(3) + dt * grad_v) @ state.F
    F_new, jp = plastic_project(F_trial, state.params, return_plastic_det=True)
    return MPMState(state.x + dt * v, v, F_new, C, state.mass, state.vol0, state.params, state.plastic_J * jp)


def substep(state: MPMState, cfg: SimConfig, dt: float, floor_height: Optional[float],
            external_force=None, frame: Optional[int] = None, index: Optional[int] = None) -> MPMState:
    st = bspline_stencil(state.x, cfg.resolution, frame, index)
    grid = p2g(state, cfg.resolution, dt, external_force, stencil=st)
    grid = grid_update(grid, dt, cfg.gravity, floor_height, cfg.floor_friction, cfg.mass_eps, cfg.boundary_cells)
    return g2p(state, grid, dt, stencil=st)


# ---------------------------------------------------------------------------
# whole simulations


def estimate_volume(points: np.ndarray, resolution: int) -> float:
    """Object volume as the number of occupied grid cells times ``dx^3``."""
    cells = np.floor(as_points(points) * resolution).astype(np.int64)
    return len(np.unique(cells, axis=0)) / resolution ** 3


def particle_masses(points: np.ndarray, cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    n = len(points)
    vol0 = estimate_volume(points, cfg.resolution) / n
    return np.full(n, cfg.density * vol0), np.full(n, vol0)


def drag_force_per_particle(points: np.ndarray, masses: np.ndarray, cond: PhysicsCondition,
                            radius: float) -> np.ndarray:
    """Spread ``cond.force`` (in units of the object's weight) evenly over the
    particles within ``radius`` of the drag point."""
    forces = np.zeros_like(points)
    if not np.any(cond.force):
        return forces
    weight = masses.sum() * STANDARD_GRAVITY
    d = np.linalg.norm(points - cond.drag_point, axis=1)
    region = d <= radius
    if not np.any(region):
        region[np.argmin(d)] = True
    forces[region] = cond.force * weight / region.sum()
    return forces


def simulate(points, cond: PhysicsCondition, cfg: SimConfig = SimConfig(), num_frames: int = 24,
             force_region_radius: Optional[float] = None) -> TrajectorySequence:
    """Simulate ``num_frames`` frames and record x, F and C at each frame boundary."""
    material = Material.parse(cond.material)
    if material == Material.RIGID:
        raise ValueError("rigid material is handled by physdyn.rigid.rigid_simulate")
    x0 = as_points(points)
    radius = cfg.force_region_radius if force_region_radius is None else force_region_radius
    substeps = cfg.substeps_for(cond.youngs_modulus, cond.poisson_ratio)
    dt = cfg.frame_dt / substeps
    limit = cfg.max_stable_dt(cond.youngs_modulus, cond.poisson_ratio)
    if dt > limit * (1 + 1e-9):
        raise StabilityError(f"substep dt={dt:.3g}s exceeds the stability bound {limit:.3g}s")

    mass, vol0 = particle_masses(x0, cfg)
    state = MPMState.at_rest(x0, mass, vol0, MaterialParams.from_condition(cond, cfg))
    force = drag_force_per_particle(x0, mass, cond, radius)
    active_frames = cond_active_frames(num_frames, cfg.force_active_fraction)
    frames = np.empty((num_frames, len(x0), 3))
    def_grads = np.empty((num_frames, len(x0), 3, 3))
    affines = np.empty_like(def_grads)
    log.debug("simulate: %d particles, %d frames x %d substeps (dt=%.3g)", len(x0), num_frames, substeps, dt)
    for f in range(num_frames):
        ext = force if f < active_frames else None
        for s in range(substeps):
            state = substep(state, cfg, dt, cond.floor_height, ext, frame=f + 1, index=s)
            if not (np.all(np.isfinite(state.x)) and np.all(np.isfinite(state.F))):
                raise SimulationError("non-finite particle state", f + 1, s)
            if material == Material.ELASTIC and np.any(np.linalg.det(state.F) <= 0):
                raise SimulationError("inverted elastic deformation gradient", f + 1, s)
        frames[f] = state.x
        def_grads[f] = state.F
        affines[f] = state.C
    return TrajectorySequence(x0.copy(), frames, cfg.frame_dt, def_grads, affines, masses=mass)


def cond_active_frames(num_frames: int, fraction: float) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"force_active_fraction must lie in [0, 1], got {fraction}")
    return int(math.ceil(fraction * num_frames - 1e-9))
