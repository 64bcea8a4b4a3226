"""Command-line entry point: ``physdyn <subcommand> --config run.json``.

Every subcommand reads one JSON config (sections below), applies
``--set dotted.key=value`` overrides, writes files into ``--out-dir`` and
prints a JSON report carrying ``schema_version``.

Config sections::

    seed, out_dir
    sim       SimConfig fields ("grid" is accepted for "resolution")
    simulate  mesh, num_points, num_frames, point_sampling, condition
    dataset   meshes, plus DatasetSpec fields
    model     ModelConfig fields
    train     data, steps, batch_size, lr, ... (TrainConfig fields), dtype
    sample    checkpoint, trajectory | mesh, condition, steps (with a trajectory, the
              subsampled input is written next to the sample as reference.ptrj)
    eval      pred, gt
    estimate  checkpoint, trajectory, free, init, lr, iterations, num_t_samples, target

A mesh entry is an OBJ path or one of ``builtin:sphere`` / ``builtin:box``.
Exit codes: 1 config error, 2 simulation failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import (Material, PhysicsCondition, TrajectorySequence, box_mesh, farthest_point_indices, icosphere,
                   make_rng, read_obj)
from .datagen import DatasetSpec, sample_object, generate_dataset, read_manifest, sample_condition, simulate_animation
from .inverse import EstimateConfig, estimate_params
from .losses import LossWeights, floor_loss, physics_loss, velocity_loss
from .metrics import evaluate_sequence
from .model import ModelConfig, TrajectoryDiffusion, ddim_sample
from .mpm import SimConfig, SimulationError
from .train import TrainConfig, train
from .trajectory_io import TrajectoryFormatError, read_trajectory, write_trajectory

SCHEMA_VERSION = 1
EXIT_CONFIG, EXIT_SIMULATION, EXIT_IO = 1, 2, 3

log = logging.getLogger("physdyn")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides) -> dict:
    out = copy.deepcopy(config)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = parse_value(value)
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    return config


def _section(config: dict, name: str) -> dict:
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return value


def _require(section: dict, key: str, prefix: str):
    if key not in section or section[key] in (None, ""):
        raise ConfigError(f"missing required config key '{prefix}.{key}'")
    return section[key]


def _build(cls, values: dict, prefix: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{prefix}': {sorted(unknown)}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{prefix}' settings: {exc}") from exc


def sim_config(config: dict) -> SimConfig:
    values = dict(_section(config, "sim"))
    if "grid" in values:
        values["resolution"] = values.pop("grid")
    return _build(SimConfig, values, "sim")


def model_config(config: dict) -> ModelConfig:
    return _build(ModelConfig, _section(config, "model"), "model")


def load_mesh(spec: str, key: str = "mesh"):
    if spec == "builtin:sphere":
        return icosphere(2)
    if spec == "builtin:box":
        return box_mesh()
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"'{key}': mesh file not found: {spec}")
    return read_obj(path)


def condition_from(values: dict, prefix: str) -> PhysicsCondition:
    try:
        return PhysicsCondition.from_dict(values)
    except KeyError as exc:
        raise ConfigError(f"missing required config key '{prefix}.{exc.args[0]}'") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{prefix}': {exc}") from exc


# ---------------------------------------------------------------------------
# output helpers


def emit(report: dict, out_dir: Path | None = None, name: str | None = None) -> dict:
    report = {"schema_version": SCHEMA_VERSION, **report}
    text = json.dumps(report, sort_keys=True)
    if out_dir is not None and name is not None:
        (out_dir / name).write_text(text + "\n")
    print(text)
    return report


def write_ply(path, points: np.ndarray) -> None:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z", "end_header"]
    lines += [f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g}" for p in points]
    Path(path).write_text("\n".join(lines) + "\n")


def export_ply_frames(out_dir: Path, traj: TrajectorySequence, stem: str = "frame") -> list[str]:
    ply_dir = out_dir / "ply"
    ply_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(traj.all_frames()):
        name = f"{stem}_{i:04d}.ply"
        write_ply(ply_dir / name, frame)
        names.append(f"ply/{name}")
    return names


def fit_to_model(traj: TrajectorySequence, cfg: ModelConfig) -> TrajectorySequence:
    """Subsample points (farthest-point order) and truncate frames to the model size."""
    if traj.num_frames < cfg.num_frames or traj.num_points < cfg.num_points:
        raise ConfigError(f"trajectory (F={traj.num_frames}, N={traj.num_points}) is smaller than the model "
                          f"(F={cfg.num_frames}, N={cfg.num_points})")
    idx = np.arange(traj.num_points)
    if traj.num_points > cfg.num_points:
        idx = farthest_point_indices(traj.initial, cfg.num_points)
    f = cfg.num_frames
    pick = lambda a: None if a is None else a[:f][:, idx]
    return TrajectorySequence(traj.initial[idx], traj.frames[:f][:, idx], traj.frame_dt, pick(traj.def_grads),
                              pick(traj.affines))


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(config: dict, args) -> dict:
    sec = _section(config, "simulate")
    mesh = load_mesh(_require(sec, "mesh", "simulate"), "simulate.mesh")
    seed = int(config.get("seed", 0))
    sim = sim_config(config)
    spec = DatasetSpec(num_points=int(sec.get("num_points", 2048)), num_frames=int(sec.get("num_frames", 24)),
                       seed=seed, point_sampling=sec.get("point_sampling", "surface"), sim=sim,
                       noise_std=float(sec.get("noise_std", 0.0)))
    rng = make_rng(seed)
    points = sample_object(mesh, spec, rng)
    if "condition" in sec:
        cond = condition_from(sec["condition"], "simulate.condition")
    else:
        cond = sample_condition(points, rng, spec, Material.parse(sec.get("material", "elastic")))
    traj = simulate_animation(points, cond, spec)
    out = args.out_dir
    write_trajectory(out / "trajectory.ptrj", traj, cond)
    report = {"command": "simulate", "file": "trajectory.ptrj", "num_points": traj.num_points,
              "num_frames": traj.num_frames, "condition": cond.to_dict()}
    if args.export_ply:
        report["ply"] = export_ply_frames(out, traj)
    return emit(report, out, "simulate.json")


def cmd_gen_dataset(config: dict, args) -> dict:
    sec = dict(_section(config, "dataset"))
    meshes = [load_mesh(m, f"dataset.meshes[{i}]") for i, m in enumerate(sec.pop("meshes", ["builtin:sphere"]))]
    sec.setdefault("seed", int(config.get("seed", 0)))
    sec["sim"] = sim_config(config)
    spec = _build(DatasetSpec, sec, "dataset")
    rows = generate_dataset(spec, meshes, args.out_dir)
    ok = [r for r in rows if r["status"] == "ok"]
    if args.export_ply:
        for row in ok:
            traj, _ = read_trajectory(args.out_dir / row["file"])
            export_ply_frames(args.out_dir, traj, Path(row["file"]).stem)
    return emit({"command": "gen-dataset", "requested": len(rows), "written": len(ok),
                 "skipped": len(rows) - len(ok), "manifest": "manifest.jsonl"}, args.out_dir, "gen_dataset.json")


def load_dataset(data_dir, cfg: ModelConfig):
    data_dir = Path(data_dir)
    items = []
    for row in read_manifest(data_dir / "manifest.jsonl"):
        traj, cond = read_trajectory(data_dir / row["file"])
        items.append((fit_to_model(traj, cfg), cond))
    if not items:
        raise ConfigError(f"dataset {data_dir} has no trajectories")
    return items


_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def cmd_train(config: dict, args) -> dict:
    sec = dict(_section(config, "train"))
    data_dir = _require(sec, "data", "train")
    sec.pop("data")
    dtype = _DTYPES.get(sec.pop("dtype", "float32"))
    if dtype is None:
        raise ConfigError("train.dtype must be float32 or float64")
    sec.setdefault("seed", int(config.get("seed", 0)))
    sec.setdefault("sim_resolution", sim_config(config).resolution)
    if args.steps is not None:
        sec["steps"] = args.steps
    if isinstance(sec.get("weights"), dict):
        sec["weights"] = _build(LossWeights, sec["weights"], "train.weights")
    tcfg = _build(TrainConfig, sec, "train")
    mcfg = model_config(config)
    items = load_dataset(data_dir, mcfg)
    torch.manual_seed(tcfg.seed)
    log_path = args.out_dir / "loss_log.jsonl"
    with open(log_path, "w") as fh:
        def record(row):
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION, **row}, sort_keys=True) + "\n")
        result = train(items, mcfg, tcfg, dtype=dtype, callback=record)
    save_checkpoint(args.out_dir / "model.pdmc", result.model)
    last = result.history[-1] if result.history else {}
    return emit({"command": "train", "checkpoint": "model.pdmc", "loss_log": "loss_log.jsonl",
                 "steps": len(result.history), "num_trajectories": len(items), "final_loss": last.get("loss")},
                args.out_dir, "train.json")


def _load_model(path) -> TrajectoryDiffusion:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_sample(config: dict, args) -> dict:
    sec = _section(config, "sample")
    model = _load_model(_require(sec, "checkpoint", "sample"))
    mcfg = model.cfg
    seed = int(config.get("seed", 0))
    frame_dt = sim_config(config).frame_dt
    if "trajectory" in sec:
        ref, cond = read_trajectory(sec["trajectory"])
        if ref.num_points < mcfg.num_points:
            raise ConfigError(f"trajectory has {ref.num_points} points, model needs {mcfg.num_points}")
        initial = ref.initial[farthest_point_indices(ref.initial, mcfg.num_points)]
        frame_dt = ref.frame_dt
    else:
        mesh = load_mesh(_require(sec, "mesh", "sample"), "sample.mesh")
        spec = DatasetSpec(num_points=mcfg.num_points, seed=seed, noise_std=0.0, sim=sim_config(config))
        initial = sample_object(mesh, spec, make_rng(seed))
        cond = None
    if "condition" in sec:
        cond = condition_from(sec["condition"], "sample.condition")
    if cond is None:
        raise ConfigError("missing required config key 'sample.condition'")
    traj = ddim_sample(model, cond, initial, steps=int(sec.get("steps", 25)), seed=seed, frame_dt=frame_dt)
    write_trajectory(args.out_dir / "sample.ptrj", traj, cond)
    report = {"command": "sample", "file": "sample.ptrj", "condition": cond.to_dict(), "seed": seed}
    if "trajectory" in sec and ref.num_frames >= mcfg.num_frames:
        # the input cut down to the model's points and frames, for ``eval``
        write_trajectory(args.out_dir / "reference.ptrj", fit_to_model(ref, mcfg), cond)
        report["reference"] = "reference.ptrj"
    if args.export_ply:
        report["ply"] = export_ply_frames(args.out_dir, traj)
    return emit(report, args.out_dir, "sample.json")


def cmd_eval(config: dict, args) -> dict:
    sec = _section(config, "eval")
    pred, _ = read_trajectory(_require(sec, "pred", "eval"))
    gt, cond = read_trajectory(_require(sec, "gt", "eval"))
    if pred.frames.shape != gt.frames.shape:
        raise ConfigError(f"pred {pred.frames.shape} and gt {gt.frames.shape} trajectories differ in shape")
    metrics = evaluate_sequence(pred.frames, gt.frames)
    p = torch.as_tensor(pred.frames, dtype=torch.float64)
    g = torch.as_tensor(gt.frames, dtype=torch.float64)
    scores = {"floor": float(floor_loss(p, cond.floor_height))}
    if gt.num_frames >= 2:
        scores["velocity"] = float(velocity_loss(p, g))
    if gt.def_grads is not None and gt.num_frames >= 3:
        scores["physics"] = float(physics_loss(p, gt.def_grads, gt.affines, None, sim_config(config).resolution,
                                               gt.frame_dt))
    return emit({"command": "eval", "metrics": metrics, "plausibility": scores}, args.out_dir, "eval.json")


def cmd_estimate(config: dict, args) -> dict:
    sec = dict(_section(config, "estimate"))
    model = _load_model(_require(sec, "checkpoint", "estimate"))
    traj, stored = read_trajectory(_require(sec, "trajectory", "estimate"))
    traj = fit_to_model(traj, model.cfg)
    init = condition_from({**stored.to_dict(), **sec.get("init", {})}, "estimate.init")
    if "init" not in sec or "youngs_modulus" not in sec["init"]:
        lo, hi = model.cfg.youngs_range
        init = init.replace(youngs_modulus=math.sqrt(lo * hi))
    free = sec.get("free", ["log10E"])
    ecfg_values = {k: sec[k] for k in ("lr", "iterations", "num_t_samples", "target", "patience") if k in sec}
    ecfg = _build(EstimateConfig, {"seed": int(config.get("seed", 0)), **ecfg_values}, "estimate")
    try:
        result = estimate_params(traj, model, init, free, ecfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return emit({"command": "estimate", "init": init.to_dict(), "free": list(free), **result.to_dict()},
                args.out_dir, "estimate.json")


COMMANDS = {
    "simulate": cmd_simulate,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "estimate": cmd_estimate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="physdyn", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, repeatable")
        p.add_argument("--out-dir", type=Path, help="output directory (default: config out_dir or '.')")
        p.add_argument("--export-ply", action="store_true", help="also write per-frame ASCII PLY files")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--steps", type=int, help="overrides train.steps")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = apply_overrides(load_config(args.config), args.overrides)
        if args.seed is not None:
            config["seed"] = args.seed
        args.out_dir = Path(args.out_dir or config.get("out_dir", "."))
        args.out_dir.mkdir(parents=True, exist_ok=True)
        args.steps = getattr(args, "steps", None)
        COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except (OSError, TrajectoryFormatError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
