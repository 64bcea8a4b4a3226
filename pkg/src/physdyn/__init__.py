"""Physics-conditioned point-cloud dynamics: MPM and rigid simulators, a
trajectory diffusion model, its losses and metrics, and inverse estimation."""

__version__ = "0.1.0"

from .core import Material, PhysicsCondition, TrajectorySequence, make_rng
from .metrics import chamfer, corr_l2, evaluate_sequence, viou
from .model import ModelConfig, TrajectoryDiffusion, ddim_sample
from .mpm import SimConfig, SimulationError, simulate
from .rigid import RigidConfig, rigid_simulate

__all__ = [
    "Material", "PhysicsCondition", "TrajectorySequence", "make_rng",
    "chamfer", "corr_l2", "evaluate_sequence", "viou",
    "ModelConfig", "TrajectoryDiffusion", "ddim_sample",
    "SimConfig", "SimulationError", "simulate",
    "RigidConfig", "rigid_simulate",
]
