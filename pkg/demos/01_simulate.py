"""
Simulating a dragged jelly ball
===============================

An elastic ball is pulled sideways by a force on one surface point and
settles on the floor. Prints the centroid per frame.
"""
import numpy as np

from physdyn.core import PhysicsCondition, make_rng, sample_ball
from physdyn.mpm import SimConfig, simulate

# a volumetric ball resting just above the floor
points = sample_ball(400, make_rng(0), center=(0.5, 0.3, 0.5), radius=0.12)
drag = points[np.argmax(points[:, 0])]

# force is in units of the object's weight
cond = PhysicsCondition(force=[0.2, 0.05, 0.0], drag_point=drag, youngs_modulus=3e4,
                        poisson_ratio=0.3, floor_height=float(points[:, 1].min()))
traj = simulate(points, cond, SimConfig(resolution=32), num_frames=12)

for i, frame in enumerate(traj.all_frames()):
    print(f"frame {i:2d}  centroid {np.round(frame.mean(axis=0), 4)}")

