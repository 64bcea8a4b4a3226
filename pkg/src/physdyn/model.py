"""Conditional trajectory diffusion transformer with spatial/temporal attention.

The denoiser predicts the clean trajectory (signal prediction). Frame 0 is
the input cloud; it is never noised and only enters through temporal
attention and as the base the predicted offsets are added to.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Material, PhysicsCondition, TrajectorySequence

NUM_MATERIALS = len(Material)
CONDITION_FEATURES = 3 + 3 + 2 + 1 + NUM_MATERIALS


@dataclass
class ModelConfig:
    num_points: int = 64
    num_frames: int = 8
    num_layers: int = 4
    latent_dim: int = 64
    num_heads: int = 4
    cond_dim: int = 64
    mlp_ratio: float = 2.0
    diffusion_steps: int = 1000
    youngs_range: tuple = (1e4, 1e7)
    poisson_range: tuple = (0.05, 0.45)
    force_scale: float = 0.3

    def __post_init__(self):
        if self.latent_dim % self.num_heads:
            raise ValueError(f"latent_dim {self.latent_dim} not divisible by num_heads {self.num_heads}")
        self.youngs_range = tuple(float(v) for v in self.youngs_range)
        self.poisson_range = tuple(float(v) for v in self.poisson_range)


# ---------------------------------------------------------------------------
# noise schedule


class NoiseSchedule:
    """Variance-preserving cosine schedule on integer steps ``0..T``.

    ``alpha[t]**2 + sigma[t]**2 == 1`` with ``alpha[0] = 1`` and
    ``alpha[T] = 0``.
    """

    def __init__(self, steps: int = 1000, offset: float = 0.008):
        self.steps = int(steps)
        t = np.arange(self.steps + 1) / self.steps
        f = np.cos((t + offset) / (1 + offset) * np.pi / 2) ** 2
        alpha_bar = np.clip(f / f[0], 0.0, 1.0)
        alpha_bar[-1] = 0.0
        self.alpha = np.sqrt(alpha_bar)
        self.sigma = np.sqrt(1.0 - alpha_bar)

    def coefficients(self, t, dtype=torch.float32):
        t = torch.as_tensor(t)
        if torch.any(t < 0) or torch.any(t > self.steps):
            raise ValueError(f"diffusion step out of range [0, {self.steps}]")
        idx = t.long().numpy()
        return (torch.as_tensor(self.alpha[idx], dtype=dtype), torch.as_tensor(self.sigma[idx], dtype=dtype))

    def ddim_timesteps(self, num_steps: int) -> list[int]:
        """Evenly spaced decreasing sub-schedule from ``T`` down towards 1."""
        if num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        ts = np.round(np.linspace(self.steps, 1, num_steps)).astype(int)
        return [int(t) for t in dict.fromkeys(ts.tolist())]


def add_noise(traj: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``alpha_t * traj + sigma_t * eps`` with ``t`` in ``[1, T]`` (per batch item)."""
    if traj.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match trajectory {tuple(traj.shape)}")
    t = torch.as_tensor(t)
    if torch.any(t < 1) or torch.any(t > schedule.steps):
        raise ValueError(f"diffusion step must lie in [1, {schedule.steps}]")
    alpha, sigma = schedule.coefficients(t, traj.dtype)
    shape = alpha.shape + (1,) * (traj.ndim - alpha.ndim)
    return alpha.reshape(shape) * traj + sigma.reshape(shape) * eps


# ---------------------------------------------------------------------------
# conditioning


def condition_features(force, drag_point, log10_youngs, poisson, floor_height, material,
                       cfg: ModelConfig) -> torch.Tensor:
    """Standardize a (possibly batched, possibly differentiable) condition.

    log10(E) and nu map affinely onto [-1, 1] over the configured ranges,
    the force (already in units of object weight) is divided by
    ``force_scale``, positions map [0, 1] -> [-1, 1], material is one-hot.
    """
    force = torch.as_tensor(force)
    dtype = force.dtype if force.is_floating_point() else torch.float32
    force = force.to(dtype)
    drag = torch.as_tensor(drag_point).to(dtype)
    log_e = torch.as_tensor(log10_youngs).to(dtype)
    nu = torch.as_tensor(poisson).to(dtype)
    h = torch.as_tensor(floor_height).to(dtype)
    lo, hi = math.log10(cfg.youngs_range[0]), math.log10(cfg.youngs_range[1])
    e_std = 2.0 * (log_e - lo) / (hi - lo) - 1.0
    plo, phi = cfg.poisson_range
    nu_std = 2.0 * (nu - plo) / (phi - plo) - 1.0
    mat = F.one_hot(torch.as_tensor(material).long(), NUM_MATERIALS).to(dtype)
    return torch.cat([force / cfg.force_scale, 2.0 * drag - 1.0, e_std[..., None], nu_std[..., None],
                      (2.0 * h - 1.0)[..., None], mat], dim=-1)


def features_from_conditions(conds: Sequence[PhysicsCondition], cfg: ModelConfig, dtype=torch.float32) -> torch.Tensor:
    return condition_features(
        torch.tensor(np.stack([c.force for c in conds]), dtype=dtype),
        torch.tensor(np.stack([c.drag_point for c in conds]), dtype=dtype),
        torch.tensor([math.log10(c.youngs_modulus) for c in conds], dtype=dtype),
        torch.tensor([c.poisson_ratio for c in conds], dtype=dtype),
        torch.tensor([c.floor_height for c in conds], dtype=dtype),
        torch.tensor([int(c.material) for c in conds]),
        cfg,
    )


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConditionEmbedder(nn.Module):
    def __init__(self, cond_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(CONDITION_FEATURES, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)


# ---------------------------------------------------------------------------
# attention blocks


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.num_heads
        q, k, v = self.qkv(x).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, d))


class AdaLN(nn.Module):
    """Parameter-free layer norm modulated by (shift, scale, gate) from an embedding."""

    def __init__(self, dim: int, emb_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mod = nn.Sequential(nn.SiLU(), nn.Linear(emb_dim, 3 * dim))

    def forward(self, x: torch.Tensor, emb: torch.Tensor):
        shift, scale, gate = self.mod(emb).unsqueeze(-2).chunk(3, dim=-1)
        return self.norm(x) * (1.0 + scale) + shift, gate


class SpatialAttention(nn.Module):
    """Self-attention over the N points of each frame plus one condition token.

    Point tokens and the condition token get separate AdaLN modulations.
    Input ``(B, F, N, d)``; only point tokens are returned/updated.
    """

    def __init__(self, dim: int, num_heads: int, cond_dim: int):
        super().__init__()
        self.cond_proj = nn.Linear(cond_dim, dim)
        self.norm_points = AdaLN(dim, dim)
        self.norm_cond = AdaLN(dim, dim)
        self.attn = Attention(dim, num_heads)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, f, n, d = x.shape
        tokens = x.reshape(b * f, n, d)
        emb = t_emb.repeat_interleave(f, dim=0)
        c_tok = self.cond_proj(cond).repeat_interleave(f, dim=0)[:, None, :]
        hx, gate = self.norm_points(tokens, emb)
        hc, _ = self.norm_cond(c_tok, emb)
        out = self.attn(torch.cat([hx, hc], dim=1))[:, :n]
        return (tokens + gate * out).reshape(b, f, n, d)


class TemporalAttention(nn.Module):
    """Self-attention along each point's track ``[x^0, x^1, ..., x^F]``.

    Input ``(B, F + 1, N, d)``; the frame-0 token is attended to but kept fixed.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm = AdaLN(dim, dim)
        self.attn = Attention(dim, num_heads)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        b, f1, n, d = x.shape
        tracks = x.permute(0, 2, 1, 3).reshape(b * n, f1, d)
        h, gate = self.norm(tracks, emb.repeat_interleave(n, dim=0))
        out = self.attn(h)
        out = torch.cat([torch.zeros_like(out[:, :1]), out[:, 1:]], dim=1)
        tracks = tracks + gate * out
        return tracks.reshape(b, n, f1, d).permute(0, 2, 1, 3)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm = AdaLN(dim, dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        b, f, n, d = x.shape
        h, gate = self.norm(x.reshape(b, f * n, d), emb)
        return x + (gate * self.mlp(h)).reshape(b, f, n, d)


class SpatioTemporalBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.latent_dim
        self.spatial = SpatialAttention(d, cfg.num_heads, cfg.cond_dim)
        self.temporal = TemporalAttention(d, cfg.num_heads)
        self.ff = FeedForward(d, cfg.mlp_ratio)
        self.cond_to_emb = nn.Linear(cfg.cond_dim, d)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        # x: (B, F + 1, N, d) with frame 0 the input cloud
        traj = self.spatial(x[:, 1:], t_emb, cond)
        x = torch.cat([x[:, :1], traj], dim=1)
        emb = t_emb + self.cond_to_emb(cond)
        x = self.temporal(x, emb)
        traj = self.ff(x[:, 1:], emb)
        return torch.cat([x[:, :1], traj], dim=1)


class TrajectoryDenoiser(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.latent_dim
        self.point_embed = nn.Linear(3, d)
        self.cond_embed = ConditionEmbedder(cfg.cond_dim)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(SpatioTemporalBlock(cfg) for _ in range(cfg.num_layers))
        self.out_norm = AdaLN(d, d)
        self.out_cond = nn.Linear(cfg.cond_dim, d)
        self.head = nn.Linear(d, 3)
        self.register_buffer("space_pe", sinusoidal_embedding(torch.arange(cfg.num_points), d).float(),
                             persistent=False)
        self.register_buffer("time_pe", sinusoidal_embedding(torch.arange(cfg.num_frames + 1), d).float(),
                             persistent=False)

    def forward(self, noisy: torch.Tensor, t, cond_features: torch.Tensor, initial: torch.Tensor) -> torch.Tensor:
        """Predict the clean frames ``(B, F, N, 3)`` from noisy ones.

        ``initial`` is the input cloud ``(B, N, 3)``; ``cond_features`` come
        from :func:`condition_features`.
        """
        b, f, n, _ = noisy.shape
        if (f, n) != (self.cfg.num_frames, self.cfg.num_points) or initial.shape != (b, n, 3):
            raise ValueError(f"expected noisy (B, {self.cfg.num_frames}, {self.cfg.num_points}, 3) and initial "
                             f"(B, N, 3), got {tuple(noisy.shape)} and {tuple(initial.shape)}")
        dtype = noisy.dtype
        t = torch.as_tensor(t).reshape(-1).expand(b)
        t_emb = self.time_mlp(sinusoidal_embedding(t, self.cfg.latent_dim).to(dtype))
        cond = self.cond_embed(cond_features.to(dtype).expand(b, -1))
        x = torch.cat([initial[:, None], noisy], dim=1)
        h = self.point_embed(x) + self.space_pe.to(dtype)[None, None] + self.time_pe.to(dtype)[None, :, None]
        h = h + t_emb[:, None, None, :]
        for block in self.blocks:
            h = block(h, t_emb, cond)
        out, _ = self.out_norm(h[:, 1:].reshape(b, f * n, -1), t_emb + self.out_cond(cond))
        offset = self.head(out).reshape(b, f, n, 3)
        pred = initial[:, None] + offset
        if not torch.all(torch.isfinite(pred)):
            raise FloatingPointError("non-finite activations in denoiser")
        return pred


class TrajectoryDiffusion(nn.Module):
    """Denoiser plus its noise schedule."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.schedule = NoiseSchedule(cfg.diffusion_steps)
        self.denoiser = TrajectoryDenoiser(cfg)

    def denoise(self, noisy, t, cond_features, initial):
        return self.denoiser(noisy, t, cond_features, initial)

    def condition(self, conds: Sequence[PhysicsCondition] | PhysicsCondition) -> torch.Tensor:
        if isinstance(conds, PhysicsCondition):
            conds = [conds]
        return features_from_conditions(conds, self.cfg, self.dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.denoiser.head.weight.dtype


def model_config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


# ---------------------------------------------------------------------------
# sampling


@torch.no_grad()
def ddim_sample(model: TrajectoryDiffusion, cond: PhysicsCondition, initial, steps: int = 25,
                generator: Optional[torch.Generator] = None, seed: Optional[int] = None,
                frame_dt: float = 1.0 / 24.0) -> TrajectorySequence:
    """Deterministic DDIM (eta = 0) from pure noise using signal prediction."""
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    cfg = model.cfg
    dtype = model.dtype
    p0 = torch.as_tensor(np.asarray(initial), dtype=dtype)[None]
    feats = model.condition(cond)
    x = torch.randn((1, cfg.num_frames, cfg.num_points, 3), generator=generator, dtype=torch.float64).to(dtype)
    ts = model.schedule.ddim_timesteps(steps)
    x0 = x
    for i, t in enumerate(ts):
        x0 = model.denoise(x, torch.tensor([t]), feats, p0)
        if i + 1 < len(ts):
            a_t, s_t = model.schedule.alpha[t], model.schedule.sigma[t]
            t_next = ts[i + 1]
            a_n, s_n = model.schedule.alpha[t_next], model.schedule.sigma[t_next]
            eps = (x - a_t * x0) / s_t
            x = a_n * x0 + s_n * eps
    frames = x0[0].double().numpy()
    return TrajectorySequence(np.asarray(initial, dtype=np.float64), frames, frame_dt=frame_dt)
