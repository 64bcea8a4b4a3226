"""Recover physical parameters of an observed trajectory with a frozen model.

The model is used as an energy: a condition that explains the motion well
lets the denoiser reconstruct the trajectory from its noised versions with
small error. Only the condition is optimized.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .core import PhysicsCondition, TrajectorySequence
from .model import TrajectoryDiffusion, add_noise, condition_features

FREE_PARAMS = ("log10E", "nu", "force", "h")
TARGETS = ("signal", "noisy")


@dataclass
class NoiseDraws:
    """A fixed stream of ``(t, eps)`` pairs shared by every energy evaluation."""

    t: torch.Tensor
    eps: torch.Tensor

    @classmethod
    def make(cls, model: TrajectoryDiffusion, num_samples: int, seed: int = 0) -> "NoiseDraws":
        if num_samples < 1:
            raise ValueError("num_t_samples must be >= 1")
        cfg = model.cfg
        gen = torch.Generator().manual_seed(int(seed))
        t = torch.randint(1, model.schedule.steps + 1, (num_samples,), generator=gen)
        eps = torch.randn((num_samples, cfg.num_frames, cfg.num_points, 3), generator=gen, dtype=torch.float64)
        return cls(t, eps.to(model.dtype))


def _check_shapes(traj: TrajectorySequence, model: TrajectoryDiffusion) -> None:
    cfg = model.cfg
    if (traj.num_frames, traj.num_points) != (cfg.num_frames, cfg.num_points):
        raise ValueError(f"trajectory (F={traj.num_frames}, N={traj.num_points}) does not match model "
                         f"(F={cfg.num_frames}, N={cfg.num_points})")


def energy_from_features(features: torch.Tensor, traj: TrajectorySequence, model: TrajectoryDiffusion,
                         draws: NoiseDraws, target: str = "signal") -> torch.Tensor:
    """Differentiable energy for standardized condition ``features`` ``(C,)``."""
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    _check_shapes(traj, model)
    dtype = model.dtype
    k = draws.t.shape[0]
    clean = torch.as_tensor(traj.frames, dtype=dtype).expand(k, -1, -1, -1)
    p0 = torch.as_tensor(traj.initial, dtype=dtype).expand(k, -1, -1)
    noisy = add_noise(clean, draws.t, draws.eps, model.schedule)
    pred = model.denoise(noisy, draws.t, features.to(dtype).expand(k, -1), p0)
    ref = clean if target == "signal" else noisy
    return ((ref - pred) ** 2).sum(dim=(1, 2, 3)).mean()


def energy(cond: PhysicsCondition, traj: TrajectorySequence, model: TrajectoryDiffusion, seed: int = 0,
           num_t_samples: int = 32, target: str = "signal") -> float:
    """Monte-Carlo denoising energy ``E_t ||target - D(P_t; t, c)||^2``.

    The ``(t, eps)`` draws depend only on ``seed``, so energies of different
    conditions are paired. ``target="signal"`` compares against the clean
    trajectory, ``"noisy"`` against the noised input itself.
    """
    draws = NoiseDraws.make(model, num_t_samples, seed)
    with torch.no_grad():
        return float(energy_from_features(model.condition(cond)[0], traj, model, draws, target))


def grid_energies(traj: TrajectorySequence, model: TrajectoryDiffusion, base: PhysicsCondition,
                  log10_values: Iterable[float], seed: int = 0, num_t_samples: int = 32,
                  target: str = "signal") -> np.ndarray:
    """Paired energies of ``base`` with E swept over ``10**log10_values``."""
    draws = NoiseDraws.make(model, num_t_samples, seed)
    out = []
    with torch.no_grad():
        for v in log10_values:
            feats = model.condition(base.replace(youngs_modulus=10.0 ** float(v)))[0]
            out.append(float(energy_from_features(feats, traj, model, draws, target)))
    return np.asarray(out)


@dataclass
class EstimateConfig:
    lr: float = 0.05
    iterations: int = 200
    num_t_samples: int = 32
    seed: int = 0
    target: str = "signal"
    patience: int = 10


@dataclass
class EstimateResult:
    condition: PhysicsCondition
    energy: float
    trace: list = field(default_factory=list)
    diverged: bool = False

    def to_dict(self) -> dict:
        return {"condition": self.condition.to_dict(), "energy": self.energy, "trace": list(self.trace),
                "diverged": self.diverged}


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def estimate_params(traj: TrajectorySequence, model: TrajectoryDiffusion, init: PhysicsCondition,
                    free: Sequence[str] = ("log10E",), cfg: EstimateConfig = EstimateConfig()) -> EstimateResult:
    """Adam on the free parameters through the frozen denoiser.

    ``log10E`` and ``h`` are optimized directly, ``nu`` through a logit over
    the model's Poisson range, ``force`` in units of object weight. Returns
    the lowest-energy condition seen. If the energy rises for ``patience``
    consecutive evaluations the run stops early with ``diverged=True``.
    """
    unknown = set(free) - set(FREE_PARAMS)
    if unknown:
        raise ValueError(f"unknown free parameters {sorted(unknown)}; choose from {FREE_PARAMS}")
    _check_shapes(traj, model)
    mcfg = model.cfg
    dtype = model.dtype
    draws = NoiseDraws.make(model, cfg.num_t_samples, cfg.seed)
    plo, phi = mcfg.poisson_range
    nu0 = min(max(init.poisson_ratio, plo + 1e-6), phi - 1e-6)
    params = {
        "log10E": torch.tensor(math.log10(init.youngs_modulus), dtype=dtype),
        "nu": torch.tensor(_logit((nu0 - plo) / (phi - plo)), dtype=dtype),
        "force": torch.tensor(np.asarray(init.force), dtype=dtype),
        "h": torch.tensor(init.floor_height, dtype=dtype),
    }
    for name in FREE_PARAMS:
        params[name].requires_grad_(name in free)
    drag = torch.tensor(np.asarray(init.drag_point), dtype=dtype)
    material = torch.tensor(int(init.material))

    def features():
        if "nu" in free:
            nu = plo + (phi - plo) * torch.sigmoid(params["nu"])
        else:
            nu = torch.tensor(init.poisson_ratio, dtype=dtype)
        return condition_features(params["force"], drag, params["log10E"], nu, params["h"], material, mcfg)

    def to_condition() -> PhysicsCondition:
        changes = {}
        if "log10E" in free:
            changes["youngs_modulus"] = float(10.0 ** params["log10E"].item())
        if "nu" in free:
            changes["poisson_ratio"] = float(plo + (phi - plo) * torch.sigmoid(params["nu"]).item())
        if "force" in free:
            changes["force"] = params["force"].detach().double().numpy().copy()
        if "h" in free:
            changes["floor_height"] = float(np.clip(params["h"].item(), 0.0, 1.0))
        return init.replace(**changes) if changes else init

    model.requires_grad_(False)
    try:
        if not free:
            with torch.no_grad():
                e = float(energy_from_features(features(), traj, model, draws, cfg.target))
            return EstimateResult(init, e, [e])
        opt = torch.optim.Adam([params[n] for n in FREE_PARAMS if n in free], lr=cfg.lr)
        trace: list[float] = []
        best = (math.inf, init)
        rises = 0
        diverged = False
        for _ in range(cfg.iterations):
            e = energy_from_features(features(), traj, model, draws, cfg.target)
            value = e.item()
            if not math.isfinite(value):
                diverged = True
                break
            if trace and value > trace[-1]:
                rises += 1
            else:
                rises = 0
            trace.append(value)
            if value < best[0]:
                best = (value, to_condition())
            if rises >= cfg.patience:
                diverged = True
                break
            opt.zero_grad(set_to_none=True)
            e.backward()
            opt.step()
        if diverged:
            warnings.warn("parameter estimation diverged; returning best condition so far", RuntimeWarning)
        return EstimateResult(best[1], best[0], trace, diverged)
    finally:
        model.requires_grad_(True)
