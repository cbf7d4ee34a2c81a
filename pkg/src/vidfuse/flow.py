"""Rectified-flow objective and Euler sampler.

Paths are straight lines ``z_t = (1 - t) z0 + t z1`` from Gaussian noise
``z0`` to data ``z1``; the regression target is the constant velocity
``z1 - z0``.  Timesteps follow a logit-normal law.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch


class FlowConfigError(ValueError):
    pass


@dataclass
class FlowSample:
    z0: torch.Tensor
    z1: torch.Tensor
    t: torch.Tensor  # (B,)
    z_t: torch.Tensor
    u_t: torch.Tensor


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise FlowConfigError(f"sampler needs at least one step, got {self.steps}")


def sample_t(generator: torch.Generator, n: int = 1, loc: float = 0.0, scale: float = 1.0, dtype=torch.float32):
    """n timesteps sigmoid(N(loc, scale^2)), all strictly inside (0, 1) in float64."""
    if scale <= 0:
        raise FlowConfigError(f"logit-normal scale must be positive, got {scale}")
    n_draw = torch.randn(n, generator=generator, dtype=torch.float64)
    return torch.sigmoid(loc + scale * n_draw).to(dtype)


def _bcast(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def interpolate(z0: torch.Tensor, z1: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    tt = _bcast(t, z1)
    return (1 - tt) * z0 + tt * z1


def make_training_sample(
    z1: torch.Tensor,
    generator: torch.Generator,
    t: torch.Tensor | None = None,
    loc: float = 0.0,
    scale: float = 1.0,
) -> FlowSample:
    z0 = torch.randn(z1.shape, generator=generator, dtype=z1.dtype)
    if t is None:
        t = sample_t(generator, z1.shape[0], loc, scale, z1.dtype)
    t = torch.as_tensor(t, dtype=z1.dtype).reshape(-1).expand(z1.shape[0])
    return FlowSample(z0=z0, z1=z1, t=t, z_t=interpolate(z0, z1, t), u_t=z1 - z0)


def flow_loss(v_pred: torch.Tensor, u_t: torch.Tensor, loss_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared velocity error over entries where ``loss_mask`` is true."""
    if v_pred.shape != u_t.shape:
        raise FlowConfigError(f"prediction {tuple(v_pred.shape)} vs target {tuple(u_t.shape)}")
    sq = (v_pred - u_t) ** 2
    if loss_mask is None:
        return sq.mean()
    mask = torch.broadcast_to(loss_mask.to(torch.bool), sq.shape)
    count = int(mask.sum())
    if count == 0:
        raise FlowConfigError("loss mask selects no entries")
    return torch.where(mask, sq, torch.zeros_like(sq)).sum() / count


VelocityFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def euler_sample(
    velocity: VelocityFn,
    shape: tuple,
    cfg: SamplerConfig = SamplerConfig(),
    z0: torch.Tensor | None = None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Integrate dz/dt = velocity(z, t) from t=0 to 1 in ``cfg.steps`` equal Euler steps.

    ``velocity`` receives (z, t) with t of shape (B,).
    """
    if z0 is None:
        gen = torch.Generator().manual_seed(cfg.seed)
        z0 = torch.randn(shape, generator=gen, dtype=dtype)
    z = z0
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = torch.full((z.shape[0],), k * dt, dtype=z.dtype)
        z = z + dt * velocity(z, t)
    return z
