"""Single rigid body under gravity, a drag force and an impulse-based floor."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import VERTICAL_AXIS, Material, PhysicsCondition, TrajectorySequence, as_points
from .mpm import STANDARD_GRAVITY, SimConfig, SimulationError, cond_active_frames


@dataclass(frozen=True)
class RigidConfig:
    frame_dt: float = 1.0 / 24.0
    substeps_per_frame: int = 40
    gravity: tuple = (0.0, -9.8, 0.0)
    restitution: float = 0.3
    friction: float = 0.4
    density: float = 1000.0
    resolution: int = 48  # only used to estimate the object volume
    force_active_fraction: float = 1.0

    @classmethod
    def from_sim_config(cls, cfg: SimConfig, **overrides) -> "RigidConfig":
        base = dict(frame_dt=cfg.frame_dt, gravity=cfg.gravity, friction=cfg.floor_friction, density=cfg.density,
                    resolution=cfg.resolution, force_active_fraction=cfg.force_active_fraction)
        base.update(overrides)
        return cls(**base)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def integrate_quat(q: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """Rotate ``q`` by the exact rotation of angular velocity ``omega`` over ``dt``."""
    speed = np.linalg.norm(omega)
    if speed * dt < 1e-15:
        return q
    half = 0.5 * speed * dt
    dq = np.concatenate([[math.cos(half)], math.sin(half) * omega / speed])
    q = quat_multiply(dq, q)
    return q / np.linalg.norm(q)


@dataclass
class RigidState:
    com: np.ndarray
    orientation: np.ndarray
    velocity: np.ndarray
    angular_velocity: np.ndarray
    mass: float
    inertia_body: np.ndarray
    offsets: np.ndarray

    @classmethod
    def from_points(cls, points: np.ndarray, total_mass: float) -> "RigidState":
        pts = as_points(points)
        com = pts.mean(axis=0)
        r = pts - com
        m = total_mass / len(pts)
        inertia = m * (np.sum(r * r) * np.eye(3) - r.T @ r)
        # point clouds lying on a line or plane give a singular tensor
        inertia += np.eye(3) * 1e-9 * max(np.trace(inertia), 1e-12)
        return cls(com, np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), np.zeros(3), total_mass, inertia, r)

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def world_points(self) -> np.ndarray:
        return self.com + self.offsets @ self.rotation().T

    def inverse_inertia_world(self) -> np.ndarray:
        R = self.rotation()
        return R @ np.linalg.inv(self.inertia_body) @ R.T


def _floor_impulse(state: RigidState, floor: float, restitution: float, friction: float,
                   touch_tol: float = 1e-9) -> None:
    """Impulse at the deepest point touching the floor if it moves inward."""
    pts = state.world_points()
    depth = floor - pts[:, VERTICAL_AXIS]
    p = int(np.argmax(depth))
    if depth[p] < -touch_tol:
        return
    n = np.zeros(3)
    n[VERTICAL_AXIS] = 1.0
    r = pts[p] - state.com
    inv_I = state.inverse_inertia_world()
    v_point = state.velocity + np.cross(state.angular_velocity, r)
    vn = float(v_point @ n)
    if vn >= 0.0:
        return
    k_n = 1.0 / state.mass + n @ np.cross(inv_I @ np.cross(r, n), r)
    jn = -(1.0 + restitution) * vn / k_n
    impulse = jn * n
    vt = v_point - vn * n
    speed_t = np.linalg.norm(vt)
    if speed_t > 1e-12 and friction > 0.0:
        t = vt / speed_t
        k_t = 1.0 / state.mass + t @ np.cross(inv_I @ np.cross(r, t), r)
        jt = min(speed_t / k_t, friction * jn)
        impulse = impulse - jt * t
    state.velocity = state.velocity + impulse / state.mass
    state.angular_velocity = state.angular_velocity + inv_I @ np.cross(r, impulse)


def _floor_projection(state: RigidState, floor: float) -> None:
    """Lift the body so no point lies below the floor."""
    depth = floor - state.world_points()[:, VERTICAL_AXIS].min()
    if depth > 0.0:
        state.com = state.com.copy()
        state.com[VERTICAL_AXIS] += depth


def rigid_simulate(points, cond: PhysicsCondition, cfg: RigidConfig = RigidConfig(), num_frames: int = 24,
                   total_mass: Optional[float] = None) -> TrajectorySequence:
    """Simulate the point cloud as one rigid body.

    Linear motion uses ``x += dt * (v_new - dt * a / 2)``, which is exact for
    constant acceleration. The drag force acts at the body-fixed drag point
    and produces torque. Returned deformation gradients are identity and
    affine matrices zero.
    """
    if Material.parse(cond.material) != Material.RIGID:
        raise ValueError("rigid_simulate requires material RIGID")
    x0 = as_points(points)
    if total_mass is None:
        cells = np.floor(x0 * cfg.resolution).astype(np.int64)
        total_mass = cfg.density * len(np.unique(cells, axis=0)) / cfg.resolution ** 3
    state = RigidState.from_points(x0, total_mass)
    gravity = np.asarray(cfg.gravity, dtype=np.float64)
    force = cond.force * total_mass * STANDARD_GRAVITY
    drag_offset = cond.drag_point - state.com
    active_frames = cond_active_frames(num_frames, cfg.force_active_fraction)
    dt = cfg.frame_dt / cfg.substeps_per_frame
    frames = np.empty((num_frames, len(x0), 3))

    for f in range(num_frames):
        ext = force if f < active_frames else np.zeros(3)
        for s in range(cfg.substeps_per_frame):
            acc = gravity + ext / state.mass
            R = state.rotation()
            torque = np.cross(R @ drag_offset, ext)
            inv_I = state.inverse_inertia_world()
            # angular momentum update, then semi-implicit orientation update
            L = R @ state.inertia_body @ R.T @ state.angular_velocity + dt * torque
            state.angular_velocity = inv_I @ L
            state.velocity = state.velocity + dt * acc
            _floor_impulse(state, cond.floor_height, cfg.restitution, cfg.friction)
            state.com = state.com + dt * (state.velocity - 0.5 * dt * acc)
            state.orientation = integrate_quat(state.orientation, state.angular_velocity, dt)
            _floor_projection(state, cond.floor_height)
            if not (np.all(np.isfinite(state.com)) and np.all(np.isfinite(state.orientation))):
                raise SimulationError("non-finite rigid state", f + 1, s)
        frames[f] = state.world_points()

    def_grads = np.tile(np.eye(3), (num_frames, len(x0), 1, 1))
    affines = np.zeros_like(def_grads)
    masses = np.full(len(x0), total_mass / len(x0))
    return TrajectorySequence(x0.copy(), frames, cfg.frame_dt, def_grads, affines, masses=masses)
