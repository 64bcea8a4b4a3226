"""Desk-scale dataset generation following the drag-force / gravity recipe."""
from __future__ import annotations

import enum
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (VERTICAL_AXIS, Material, PhysicsCondition, TriangleMesh, estimate_normals, make_rng,
                   normalize_to_domain, sample_surface_points, sample_volume_points)
from .mpm import STANDARD_GRAVITY, SimConfig, SimulationError, particle_masses, simulate
from .rigid import RigidConfig, rigid_simulate
from .trajectory_io import read_trajectory, write_trajectory  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class Scenario(str, enum.Enum):
    DRAG_FORCE = "drag_force"
    GRAVITY_DROP = "gravity_drop"


@dataclass
class DatasetSpec:
    counts: dict = field(default_factory=lambda: {"elastic": 4})
    num_points: int = 2048
    num_frames: int = 24
    seed: int = 0
    youngs_range: tuple = (1e4, 1e7)
    poisson_range: tuple = (0.05, 0.45)
    force_range: tuple = (0.02, 0.3)
    noise_std: float = 0.01
    scenario: Scenario = Scenario.DRAG_FORCE
    drop_clearance: float = 0.05
    min_floor: float = 0.05
    normal_neighbors: int = 16
    point_sampling: str = "surface"
    sim: SimConfig = field(default_factory=SimConfig)
    rigid_substeps: int = 40
    rigid_restitution: float = 0.3

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        if isinstance(self.sim, dict):
            self.sim = SimConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.sim.items()})
        if self.num_points < 1 or self.num_frames < 1:
            raise ValueError("num_points and num_frames must be >= 1")
        if self.point_sampling not in ("surface", "volume"):
            raise ValueError(f"point_sampling must be 'surface' or 'volume', got {self.point_sampling!r}")
        lo, hi = self.youngs_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad Young's modulus range {self.youngs_range}")
        for name in ("youngs_range", "poisson_range", "force_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    def materials(self) -> list[Material]:
        """Material of every animation, in generation order."""
        out: list[Material] = []
        for name, count in self.counts.items():
            out += [Material.parse(name)] * int(count)
        return out


def sample_condition(points: np.ndarray, rng: np.random.Generator, spec: DatasetSpec,
                     material: Material = Material.ELASTIC) -> PhysicsCondition:
    """Draw drag point, force, material parameters and floor height.

    The force is stored in units of the object's weight G, so its norm lies
    in ``spec.force_range``; see :func:`object_weight` for G in newtons.
    """
    idx = int(rng.integers(len(points)))
    drag = points[idx]
    log_e = rng.uniform(math.log10(spec.youngs_range[0]), math.log10(spec.youngs_range[1]))
    nu = rng.uniform(*spec.poisson_range)
    magnitude = rng.uniform(*spec.force_range)
    lowest = float(points[:, VERTICAL_AXIS].min())
    if spec.scenario == Scenario.GRAVITY_DROP:
        force = np.zeros(3)
        floor = max(lowest - spec.drop_clearance, spec.min_floor)
    else:
        normal = estimate_normals(points, [idx], k=spec.normal_neighbors)[0]
        force = magnitude * normal
        floor = lowest
    return PhysicsCondition(force=force, drag_point=drag, youngs_modulus=10.0 ** log_e,
                            poisson_ratio=nu, floor_height=floor, material=material)


def rotate_about_vertical(points: np.ndarray, angle: float, center: Optional[np.ndarray] = None) -> np.ndarray:
    center = points.mean(axis=0) if center is None else center
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return (points - center) @ R.T + center


def augment(points: np.ndarray, rng: np.random.Generator, noise_std: float = 0.01,
            margin: float = 0.1, angle: Optional[float] = None, renormalize: bool = True) -> np.ndarray:
    """Random rotation about the vertical axis, Gaussian jitter, re-normalization."""
    if angle is None:
        angle = rng.uniform(0.0, 2.0 * math.pi)
    out = rotate_about_vertical(points, angle)
    if noise_std > 0:
        out = out + rng.normal(0.0, noise_std, size=out.shape)
    if renormalize:
        out, _ = normalize_to_domain(out, margin)
    return out


def sample_object(mesh: TriangleMesh, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.point_sampling == "volume":
        pts = sample_volume_points(mesh, spec.num_points, rng)
    else:
        pts = sample_surface_points(mesh, spec.num_points, rng)
    pts, _ = normalize_to_domain(pts, spec.sim.margin)
    return augment(pts, rng, spec.noise_std, spec.sim.margin)


def simulate_animation(points: np.ndarray, cond: PhysicsCondition, spec: DatasetSpec):
    if cond.material == Material.RIGID:
        rcfg = RigidConfig.from_sim_config(spec.sim, substeps_per_frame=spec.rigid_substeps,
                                           restitution=spec.rigid_restitution)
        return rigid_simulate(points, cond, rcfg, spec.num_frames)
    return simulate(points, cond, spec.sim, spec.num_frames)


def _generate_one(args):
    index, material, mesh_index, mesh, spec, out_dir = args
    rng = make_rng(spec.seed, index)
    row = {"index": index, "seed": [spec.seed, index], "material": material.name.lower(), "mesh": mesh_index}
    try:
        points = sample_object(mesh, spec, rng)
        cond = sample_condition(points, rng, spec, material)
        row["condition"] = cond.to_dict()
        traj = simulate_animation(points, cond, spec)
        name = f"anim_{index:06d}.ptrj"
        write_trajectory(Path(out_dir) / name, traj, cond)
        row.update(file=name, status="ok")
    except (SimulationError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("animation %d (seed %s) skipped: %s", index, row["seed"], exc)
        row.update(file=None, status="skipped", reason=str(exc))
    return row


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("PHYSDYN_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(spec: DatasetSpec, meshes: Sequence[TriangleMesh], out_dir,
                     workers: Optional[int] = None) -> list[dict]:
    """Generate every animation in ``spec``.

    Successful animations are listed in ``manifest.jsonl`` (one JSON object
    per line); failures go to ``skipped.jsonl`` with the reason. All rows are
    returned.

    Animation ``i`` uses mesh ``i mod len(meshes)`` and its own random
    stream derived from ``(seed, i)``, so output does not depend on the
    number of workers.
    """
    if not meshes:
        raise ValueError("at least one mesh is required")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, m, i % len(meshes), meshes[i % len(meshes)], spec, str(out)) for i, m in enumerate(spec.materials())]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_generate_one, jobs))
    else:
        rows = [_generate_one(job) for job in jobs]
    ok = [r for r in rows if r["status"] == "ok"]
    skipped = [r for r in rows if r["status"] != "ok"]
    _write_jsonl(out / "manifest.jsonl", ok)
    _write_jsonl(out / "skipped.jsonl", skipped)
    return rows


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION, **row}, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def spec_to_dict(spec: DatasetSpec) -> dict:
    d = asdict(spec)
    d["scenario"] = spec.scenario.value
    return d


def object_weight(points: np.ndarray, cfg: SimConfig) -> float:
    """Weight G of the object as simulated (total mass times standard gravity)."""
    mass, _ = particle_masses(points, cfg)
    return float(mass.sum() * STANDARD_GRAVITY)
