"""Training loop for the trajectory diffusion model."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import Material, PhysicsCondition, TrajectorySequence
from .losses import LossAux, LossWeights, total_loss
from .model import ModelConfig, TrajectoryDiffusion, add_noise, features_from_conditions

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    warmup_steps: int = 100
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    sim_resolution: int = 48
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)


@dataclass
class TrainingSet:
    """Stacked tensors for a list of (trajectory, condition) pairs."""

    initial: torch.Tensor  # (M, N, 3)
    frames: torch.Tensor  # (M, F, N, 3)
    features: torch.Tensor  # (M, C)
    floor: torch.Tensor  # (M,)
    def_grads: Optional[torch.Tensor]
    affines: Optional[torch.Tensor]
    masses: torch.Tensor
    has_physics: torch.Tensor
    frame_dt: float

    @classmethod
    def build(cls, items: Sequence[tuple[TrajectorySequence, PhysicsCondition]], cfg: ModelConfig,
              dtype=torch.float32) -> "TrainingSet":
        if not items:
            raise ValueError("training set is empty")
        trajs = [t for t, _ in items]
        conds = [c for _, c in items]
        for t in trajs:
            if (t.num_frames, t.num_points) != (cfg.num_frames, cfg.num_points):
                raise ValueError(f"trajectory shape (F={t.num_frames}, N={t.num_points}) does not match model "
                                 f"(F={cfg.num_frames}, N={cfg.num_points})")
        frame_dts = {round(float(t.frame_dt), 9) for t in trajs}
        if len(frame_dts) > 1:
            raise ValueError(f"mixed frame intervals {sorted(frame_dts)}")
        eye = np.broadcast_to(np.eye(3), (cfg.num_frames, cfg.num_points, 3, 3))
        has_phys = [t.def_grads is not None and t.affines is not None and c.material != Material.RIGID
                    for t, c in zip(trajs, conds)]
        any_phys = any(has_phys)
        as_t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=dtype)
        return cls(
            initial=as_t(np.stack([t.initial for t in trajs])),
            frames=as_t(np.stack([t.frames for t in trajs])),
            features=features_from_conditions(conds, cfg, dtype),
            floor=as_t([c.floor_height for c in conds]),
            def_grads=as_t(np.stack([t.def_grads if h else eye for t, h in zip(trajs, has_phys)]))
            if any_phys else None,
            affines=as_t(np.stack([t.affines if h else np.zeros_like(eye) for t, h in zip(trajs, has_phys)]))
            if any_phys else None,
            masses=as_t(np.stack([t.masses if t.masses is not None else np.ones(t.num_points) for t in trajs])),
            has_physics=torch.tensor(has_phys),
            frame_dt=float(trajs[0].frame_dt),
        )

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class TrainResult:
    model: TrajectoryDiffusion
    history: list = field(default_factory=list)


def cosine_lr(step: int, total: int, warmup: int) -> float:
    """Linear warmup then cosine decay, as a multiplier on the base rate."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    span = max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(step - warmup, span) / span))


def diffusion_batch_loss(model: TrajectoryDiffusion, data: TrainingSet, idx: torch.Tensor, t: torch.Tensor,
                         eps: torch.Tensor, weights: LossWeights, resolution: int):
    target = data.frames[idx]
    noisy = add_noise(target, t, eps, model.schedule)
    pred = model.denoise(noisy, t, data.features[idx], data.initial[idx])
    aux = LossAux(
        floor_height=data.floor[idx],
        def_grads=data.def_grads[idx] if data.def_grads is not None else None,
        affines=data.affines[idx] if data.affines is not None else None,
        masses=data.masses[idx],
        has_physics=data.has_physics[idx],
        resolution=resolution,
        frame_dt=data.frame_dt,
    )
    return total_loss(pred, target, aux, weights)


def train(items, model_cfg: ModelConfig, cfg: TrainConfig = TrainConfig(),
          model: Optional[TrajectoryDiffusion] = None, dtype=torch.float32,
          callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train (or continue training) a model on ``(trajectory, condition)`` pairs.

    Each step draws a batch, a diffusion step ``t ~ U{1..T}`` and Gaussian
    noise from one seeded generator, so runs are reproducible given the seed.
    """
    torch.manual_seed(cfg.seed)
    if model is None:
        model = TrajectoryDiffusion(model_cfg).to(dtype)
    if not isinstance(items, TrainingSet) and cfg.weights.physics > 0:
        for i, (traj, cond) in enumerate(items):
            if cond.material != Material.RIGID and (traj.def_grads is None or traj.affines is None):
                raise ValueError(f"item {i} lacks deformation gradients or affine matrices needed by the physics loss")
    data = items if isinstance(items, TrainingSet) else TrainingSet.build(items, model_cfg, dtype)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: cosine_lr(s, cfg.steps, cfg.warmup_steps))
    history = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
        t = torch.randint(1, model.schedule.steps + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(data.frames[idx].shape, generator=gen, dtype=torch.float64).to(dtype)
        loss, terms = diffusion_batch_loss(model, data, idx, t, eps, cfg.weights, cfg.sim_resolution)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        lr = opt.param_groups[0]["lr"]
        opt.step()
        sched.step()
        row = {"step": step, "loss": loss.item(), "lr": lr, "grad_norm": grad_norm.item()}
        row.update({k: v.item() for k, v in terms.items()})
        history.append(row)
        if callback is not None:
            callback(row)
        if step % 500 == 0:
            log.info("step %d loss %.5g", step, row["loss"])
    model.eval()
    return TrainResult(model, history)
