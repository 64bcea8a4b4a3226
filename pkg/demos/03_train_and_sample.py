"""
Training the denoiser and sampling a trajectory
===============================================

Overfits a small model on one simulated trajectory, then draws a DDIM sample
from the same condition and compares it with the simulation.
Takes a few minutes on one CPU core.
"""
import numpy as np
import torch

from physdyn.core import PhysicsCondition, make_rng, sample_ball
from physdyn.losses import LossWeights
from physdyn.metrics import evaluate_sequence
from physdyn.model import ModelConfig, ddim_sample
from physdyn.mpm import SimConfig, simulate
from physdyn.train import TrainConfig, train

torch.set_num_threads(1)

x = sample_ball(32, make_rng(3), (0.5, 0.3, 0.5), 0.15)
cond = PhysicsCondition([0.3, 0.1, 0.0], x[np.argmax(x[:, 0])], 3e4, 0.3, float(x[:, 1].min()))
traj = simulate(x, cond, SimConfig(resolution=32), 4)

mcfg = ModelConfig(num_points=32, num_frames=4, num_layers=2, latent_dim=32, num_heads=4, cond_dim=32)
cfg = TrainConfig(steps=800, batch_size=4, lr=5e-3, sim_resolution=32, weights=LossWeights(physics=0.0))
result = train([(traj, cond)], mcfg, cfg)
losses = [row["loss"] for row in result.history]
print(f"loss {losses[0]:.4f} -> {np.mean(losses[-50:]):.5f}")

sample = ddim_sample(result.model, cond, x, steps=25, seed=0)
print(evaluate_sequence(sample.frames, traj.frames))
