"""
Comparing point-cloud sequences
===============================

Voxel IoU, Chamfer distance and correspondence L2 between a simulation and
a jittered copy of it.
"""
import numpy as np

from physdyn.core import PhysicsCondition, make_rng, sample_ball
from physdyn.metrics import chamfer, corr_l2, evaluate_sequence, viou
from physdyn.mpm import SimConfig, simulate

rng = make_rng(4)
x = sample_ball(300, rng, (0.5, 0.3, 0.5), 0.12)
traj = simulate(x, PhysicsCondition([0.2, 0, 0], x[0], 5e4, 0.3, float(x[:, 1].min())), SimConfig(resolution=24), 6)

for sigma in (0.0, 0.005, 0.02):
    noisy = traj.frames + sigma * rng.normal(size=traj.frames.shape)
    print(f"sigma {sigma:<6}", evaluate_sequence(noisy, traj.frames))

# single frames
a, b = traj.frames[0], traj.frames[-1]
print("first vs last frame: viou", viou(a, b), "chamfer", chamfer(a, b), "l2", corr_l2(a, b))
