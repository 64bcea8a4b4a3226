import math

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from physdyn.core import Material, PhysicsCondition, TrajectorySequence, icosphere, make_rng, sample_surface_points
from physdyn.datagen import (DatasetSpec, Scenario, augment, generate_dataset, object_weight, read_manifest,
                             sample_condition)
from physdyn.mpm import SimConfig
from physdyn.trajectory_io import (MagicMismatchError, TruncatedFileError, VersionMismatchError, decode_trajectory,
                                   encode_trajectory, read_trajectory, write_trajectory)


def sphere_cloud(n=400, seed=0):
    return sample_surface_points(icosphere(2), n, make_rng(seed)) * 0.3 + 0.5


def test_sampled_force_points_outward():
    pts = sphere_cloud()
    spec = DatasetSpec()
    rng = make_rng(1)
    centroid = pts.mean(axis=0)
    for _ in range(50):
        c = sample_condition(pts, rng, spec)
        assert np.dot(c.force, c.drag_point - centroid) > 0
        assert np.min(np.linalg.norm(pts - c.drag_point, axis=1)) < 1e-12


def test_condition_distribution():
    pts = sphere_cloud(200)
    spec = DatasetSpec()
    rng = make_rng(2)
    conds = [sample_condition(pts, rng, spec) for _ in range(2000)]
    log_e = np.log10([c.youngs_modulus for c in conds])
    nu = np.array([c.poisson_ratio for c in conds])
    mag = np.array([np.linalg.norm(c.force) for c in conds])
    assert log_e.min() >= 4 and log_e.max() <= 7
    # log-uniform: mean 5.5, std of U(4, 7) is sqrt(9/12) / sqrt(2000) ~ 0.02
    assert 5.4 <= log_e.mean() <= 5.6
    assert nu.min() >= 0.05 and nu.max() <= 0.45
    assert mag.min() >= 0.02 - 1e-12 and mag.max() <= 0.3 + 1e-12
    assert all(c.floor_height == pytest.approx(pts[:, 1].min()) for c in conds[:10])


def test_gravity_drop_has_no_force_and_clearance():
    pts = sphere_cloud(200)
    spec = DatasetSpec(scenario=Scenario.GRAVITY_DROP, drop_clearance=0.05)
    c = sample_condition(pts, make_rng(3), spec, Material.SAND)
    assert not np.any(c.force)
    assert c.floor_height == pytest.approx(pts[:, 1].min() - 0.05)
    assert c.material == Material.SAND


def test_augment_identity_and_isometry():
    pts = sphere_cloud(100)
    same = augment(pts, make_rng(0), noise_std=0.0, angle=0.0, renormalize=False)
    np.testing.assert_allclose(same, pts, atol=1e-15)
    rotated = augment(pts, make_rng(0), noise_std=0.0, renormalize=False)
    np.testing.assert_allclose(pdist(rotated), pdist(pts), atol=1e-9)
    # the vertical coordinate is untouched by a rotation about y
    np.testing.assert_allclose(rotated[:, 1], pts[:, 1], atol=1e-12)


def test_augment_noise_level():
    pts = np.full((100_000, 3), 0.5)
    pts[:, 0] = np.linspace(0.2, 0.8, len(pts))
    noisy = augment(pts, make_rng(4), noise_std=0.01, angle=0.0, renormalize=False)
    assert abs(np.std(noisy - pts) - 0.01) < 0.001


def test_augment_output_in_domain():
    out = augment(sphere_cloud(), make_rng(5), margin=0.1)
    assert out.min() >= 0.1 - 1e-12 and out.max() <= 0.9 + 1e-12


def test_object_weight_uses_standard_gravity():
    pts = sphere_cloud()
    zero_g = SimConfig(gravity=(0.0, 0.0, 0.0))
    assert object_weight(pts, zero_g) == pytest.approx(object_weight(pts, SimConfig()))
    assert object_weight(pts, SimConfig()) > 0


def small_spec(**kw):
    base = dict(counts={"elastic": 2, "rigid": 1, "plasticine": 1}, num_points=64, num_frames=3, seed=7,
                youngs_range=(1e4, 1e5), sim=SimConfig(resolution=20))
    base.update(kw)
    return DatasetSpec(**base)


def test_generate_dataset_deterministic(tmp_path):
    rows_a = generate_dataset(small_spec(), [icosphere(1)], tmp_path / "a")
    rows_b = generate_dataset(small_spec(), [icosphere(1)], tmp_path / "b", workers=2)
    assert rows_a == rows_b
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = read_manifest(tmp_path / "a" / "manifest.jsonl")
    assert len(manifest) == 4 - sum(r["status"] != "ok" for r in rows_a)
    for row in manifest:
        traj, cond = read_trajectory(tmp_path / "a" / row["file"])
        assert cond.material.name.lower() == row["material"]
        assert row["schema_version"] == 1 and row["seed"] == [7, row["index"]]
        if cond.material == Material.RIGID:
            continue
        assert traj.def_grads is not None
        assert np.all(np.linalg.det(traj.def_grads.astype(np.float64)) > 0)


def test_generate_dataset_records_skips(tmp_path):
    # a huge stable-bound violation forces a simulation failure
    spec = small_spec(counts={"elastic": 2}, sim=SimConfig(resolution=20, substeps_per_frame=1))
    rows = generate_dataset(spec, [icosphere(1)], tmp_path)
    skipped = read_manifest(tmp_path / "skipped.jsonl")
    assert len(skipped) == 2 and all("stability" in r["reason"] for r in skipped)
    assert read_manifest(tmp_path / "manifest.jsonl") == []
    assert all(r["status"] == "skipped" for r in rows)


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(num_points=0)
    with pytest.raises(ValueError):
        DatasetSpec(point_sampling="grid")
    assert DatasetSpec(counts={"sand": 2, "rigid": 1}).materials() == [Material.SAND, Material.SAND, Material.RIGID]


# -- PTRJ ------------------------------------------------------------------


def example_traj(with_fields=True):
    rng = make_rng(11)
    n, f = 5, 3
    traj = TrajectorySequence(
        rng.random((n, 3)).astype(np.float32).astype(np.float64),
        rng.random((f, n, 3)).astype(np.float32).astype(np.float64),
        np.float32(1 / 24),
        rng.random((f, n, 3, 3)).astype(np.float32).astype(np.float64) if with_fields else None,
        rng.random((f, n, 3, 3)).astype(np.float32).astype(np.float64) if with_fields else None,
    )
    cond = PhysicsCondition(np.float32([0.1, 0.2, -0.1]), np.float32([0.4, 0.5, 0.6]), np.float32(12345.0),
                            np.float32(0.3), np.float32(0.25), Material.PLASTICINE)
    return traj, cond


@pytest.mark.parametrize("with_fields", [True, False])
def test_ptrj_round_trip_bitwise(tmp_path, with_fields):
    traj, cond = example_traj(with_fields)
    write_trajectory(tmp_path / "t.ptrj", traj, cond)
    back, bcond = read_trajectory(tmp_path / "t.ptrj")
    np.testing.assert_array_equal(back.all_frames(), traj.all_frames())
    assert back.frame_dt == pytest.approx(float(traj.frame_dt))
    assert bcond.to_dict() == cond.to_dict()
    if with_fields:
        np.testing.assert_array_equal(back.def_grads, traj.def_grads)
        np.testing.assert_array_equal(back.affines, traj.affines)
    else:
        assert back.def_grads is None
    assert encode_trajectory(back, bcond) == (tmp_path / "t.ptrj").read_bytes()


def test_ptrj_layout():
    traj, cond = example_traj()
    buf = encode_trajectory(traj, cond)
    n, f = 5, 3
    assert buf[:4] == b"PTRJ"
    assert len(buf) == 20 + 44 + 4 * ((f + 1) * n * 3 + 2 * f * n * 9)
    assert int.from_bytes(buf[4:8], "little") == 1
    assert buf[16] == int(Material.PLASTICINE) and buf[17] == 1


def test_ptrj_errors():
    traj, cond = example_traj()
    buf = encode_trajectory(traj, cond)
    with pytest.raises(MagicMismatchError) as e:
        decode_trajectory(b"XTRJ" + buf[4:])
    assert e.value.code == "magic-mismatch"
    with pytest.raises(VersionMismatchError):
        decode_trajectory(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    with pytest.raises(TruncatedFileError) as e:
        decode_trajectory(buf[: len(buf) - 10])
    assert e.value.section == "affines" and e.value.code == "truncated"
    with pytest.raises(TruncatedFileError) as e:
        decode_trajectory(buf[:100])
    assert e.value.section == "positions"
