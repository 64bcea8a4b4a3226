"""Shared domain types, seeded sampling and point-cloud utilities.

Point clouds are plain ``(N, 3)`` float arrays throughout the package. The
vertical axis is ``y`` (index 1); gravity points along ``-y``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

VERTICAL_AXIS = 1
DEFAULT_MARGIN = 0.1


class Material(enum.IntEnum):
    ELASTIC = 0
    PLASTICINE = 1
    SAND = 2
    RIGID = 3

    @classmethod
    def parse(cls, value) -> "Material":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown material {value!r}") from None
        return cls(int(value))


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a PCG64 stream derived from ``seed`` and optional integer keys.

    ``make_rng(seed, i)`` gives worker ``i`` its own stream, so results do not
    depend on how work is scheduled.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def as_points(points, name: str = "points") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise ValueError(f"{name} must have shape (N, 3) with N >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


@dataclass(frozen=True)
class PhysicsCondition:
    """Conditioning for one animation.

    ``force`` is expressed in multiples of the object's weight G (total mass
    times |gravity|); simulators convert it to newtons.
    """

    force: np.ndarray
    drag_point: np.ndarray
    youngs_modulus: float
    poisson_ratio: float
    floor_height: float
    material: Material = Material.ELASTIC

    def __post_init__(self):
        object.__setattr__(self, "force", np.asarray(self.force, dtype=np.float64).reshape(3))
        object.__setattr__(self, "drag_point", np.asarray(self.drag_point, dtype=np.float64).reshape(3))
        object.__setattr__(self, "material", Material.parse(self.material))
        object.__setattr__(self, "youngs_modulus", float(self.youngs_modulus))
        object.__setattr__(self, "poisson_ratio", float(self.poisson_ratio))
        object.__setattr__(self, "floor_height", float(self.floor_height))
        self.validate()

    def validate(self) -> None:
        if not self.youngs_modulus > 0:
            raise ValueError(f"Young's modulus must be positive, got {self.youngs_modulus}")
        if not 0.0 < self.poisson_ratio < 0.5:
            raise ValueError(f"Poisson ratio must lie in (0, 0.5), got {self.poisson_ratio}")
        if not 0.0 <= self.floor_height <= 1.0:
            raise ValueError(f"floor height must lie in [0, 1], got {self.floor_height}")
        if not (np.all(np.isfinite(self.force)) and np.all(np.isfinite(self.drag_point))):
            raise ValueError("force and drag point must be finite")

    def replace(self, **changes) -> "PhysicsCondition":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "force": [float(v) for v in self.force],
            "drag_point": [float(v) for v in self.drag_point],
            "youngs_modulus": self.youngs_modulus,
            "poisson_ratio": self.poisson_ratio,
            "floor_height": self.floor_height,
            "material": self.material.name.lower(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhysicsCondition":
        return cls(
            force=d["force"],
            drag_point=d["drag_point"],
            youngs_modulus=d["youngs_modulus"],
            poisson_ratio=d["poisson_ratio"],
            floor_height=d["floor_height"],
            material=d.get("material", "elastic"),
        )


@dataclass
class TrajectorySequence:
    """Point trajectories with one-to-one correspondence across frames.

    ``initial`` is frame 0 (the input cloud, ``(N, 3)``); ``frames`` holds the
    ``F`` simulated frames ``(F, N, 3)``. ``def_grads`` and ``affines`` are
    ``(F, N, 3, 3)`` when recorded by the MPM backend.
    """

    initial: np.ndarray
    frames: np.ndarray
    frame_dt: float
    def_grads: Optional[np.ndarray] = None
    affines: Optional[np.ndarray] = None
    masses: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.initial = np.asarray(self.initial)
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[1:] != self.initial.shape or self.initial.shape[-1] != 3:
            raise ValueError(
                f"frames {self.frames.shape} inconsistent with initial cloud {self.initial.shape}"
            )
        for name in ("def_grads", "affines"):
            arr = getattr(self, name)
            if arr is not None and np.shape(arr) != self.frames.shape + (3,):
                raise ValueError(f"{name} must have shape {self.frames.shape + (3,)}, got {np.shape(arr)}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_points(self) -> int:
        return self.frames.shape[1]

    def all_frames(self) -> np.ndarray:
        """Frames 0..F stacked as ``(F + 1, N, 3)``."""
        return np.concatenate([self.initial[None], self.frames], axis=0)


@dataclass(frozen=True)
class DomainTransform:
    """Isotropic map ``x -> scale * x + translation``."""

    scale: float
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) + self.translation

    def inverse(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) / self.scale


def normalize_to_domain(points, margin: float = DEFAULT_MARGIN) -> tuple[np.ndarray, DomainTransform]:
    """Fit ``points`` isotropically and centred into ``[margin, 1 - margin]^3``."""
    pts = as_points(points)
    if not 0.0 <= margin < 0.5:
        raise ValueError(f"margin must lie in [0, 0.5), got {margin}")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0.0:
        raise ValueError("degenerate point cloud: bounding box has zero extent")
    scale = (1.0 - 2.0 * margin) / extent
    translation = 0.5 - scale * 0.5 * (lo + hi)
    transform = DomainTransform(scale, translation)
    return transform.apply(pts), transform


def farthest_point_sample(points, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; returns the selected points in order.

    Ties go to the lowest index (``np.argmax`` semantics).
    """
    return points_from_indices(points, farthest_point_indices(points, k, start_index))


def farthest_point_indices(points, k: int, start_index: int = 0) -> np.ndarray:
    pts = as_points(points)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if not 0 <= start_index < n:
        raise IndexError(f"start_index {start_index} out of range for {n} points")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start_index
    dist = np.sum((pts - pts[start_index]) ** 2, axis=1)
    dist[start_index] = -1.0
    for j in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[j] = nxt
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
        dist[chosen[: j + 1]] = -1.0
    return chosen


def points_from_indices(points, idx) -> np.ndarray:
    return as_points(points)[np.asarray(idx)]


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3 or f.shape[0] < 1:
            raise ValueError(f"faces must be (M, 3) with M >= 1, got {f.shape}")
        if f.min() < 0 or f.max() >= v.shape[0]:
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def read_obj(path) -> TriangleMesh:
    """Read ``v`` and triangular ``f`` records from an ASCII OBJ file.

    Face entries may carry ``v/vt/vn`` suffixes; only the vertex index is
    used. Negative (relative) indices are resolved as in the OBJ format.
    """
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vertices.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: only triangular faces are supported")
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(vertices) + i)
            faces.append(idx)
    if not faces:
        raise ValueError(f"{path}: no faces")
    return TriangleMesh(np.array(vertices), np.array(faces))


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def sample_surface_points(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh faces."""
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = (mesh.vertices[mesh.faces[face, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def winding_number(mesh: TriangleMesh, query: np.ndarray) -> np.ndarray:
    """Generalized winding number of ``query`` points (~1 inside, ~0 outside)."""
    total = np.zeros(len(query))
    for chunk in np.array_split(np.arange(len(query)), max(1, len(query) // 256)):
        q = query[chunk][:, None, :]
        a, b, c = (mesh.vertices[mesh.faces[:, i]][None] - q for i in range(3))
        la, lb, lc = (np.linalg.norm(x, axis=-1) for x in (a, b, c))
        det = np.einsum("...i,...i", a, np.cross(b, c))
        div = (la * lb * lc + np.einsum("...i,...i", a, b) * lc
               + np.einsum("...i,...i", b, c) * la + np.einsum("...i,...i", c, a) * lb)
        total[chunk] = np.arctan2(det, div).sum(axis=1) / (2.0 * np.pi)
    return total


def sample_volume_points(mesh: TriangleMesh, n: int, rng: np.random.Generator, batch: int = 4096) -> np.ndarray:
    """Rejection-sample ``n`` points inside a closed mesh."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    out: list[np.ndarray] = []
    count = 0
    for _ in range(1000):
        cand = lo + rng.random((batch, 3)) * (hi - lo)
        inside = cand[np.abs(winding_number(mesh, cand)) > 0.5]
        out.append(inside)
        count += len(inside)
        if count >= n:
            return np.concatenate(out)[:n]
    raise ValueError("mesh encloses no volume")


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriangleMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    verts = lo + corners * (hi - lo)
    faces = [
        (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),
        (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),
        (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),
    ]
    return TriangleMesh(verts, np.array(faces))


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(np.array(v) * radius, np.array(faces))


def sample_ball(n: int, rng: np.random.Generator, center=(0.5, 0.5, 0.5), radius: float = 0.1) -> np.ndarray:
    """Uniform samples inside a ball, handy for volumetric test bodies."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return np.asarray(center, float) + d * r[:, None]


def estimate_normals(points: np.ndarray, index: Sequence[int] | np.ndarray, k: int = 16) -> np.ndarray:
    """PCA normals at ``points[index]`` from their ``k`` nearest neighbours,
    oriented away from the cloud centroid."""
    pts = as_points(points)
    index = np.atleast_1d(np.asarray(index))
    k = min(k, len(pts))
    centroid = pts.mean(axis=0)
    normals = np.empty((len(index), 3))
    for row, i in enumerate(index):
        d2 = np.sum((pts - pts[i]) ** 2, axis=1)
        nbrs = pts[np.argsort(d2, kind="stable")[:k]]
        centered = nbrs - nbrs.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        n = vt[-1]
        outward = pts[i] - centroid
        if np.linalg.norm(outward) < 1e-12:
            outward = n
        if np.dot(n, outward) < 0:
            n = -n
        normals[row] = n / np.linalg.norm(n)
    return normals
