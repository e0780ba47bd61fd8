"""Euler integration of the rectified-flow ODE with classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from ..errors import ConfigurationError

VelocityFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, "torch.Tensor | None"], torch.Tensor]


@dataclass
class SamplerConfig:
    steps: int = 64
    cfg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError("sampler steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        self.steps = int(self.steps)


@dataclass
class Conditions:
    """content (B, n, p, d); style (B, q, d) or None for an unconditional request."""

    content: torch.Tensor
    style: torch.Tensor | None


def initial_noise(shape: tuple[int, ...], seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=dtype)


def guided_velocity(velocity: VelocityFn, x, t, cond: Conditions, cfg_scale: float) -> torch.Tensor:
    v_cond = velocity(x, t, cond.content, cond.style)
    if cfg_scale == 1.0 or cond.style is None:
        return v_cond
    v_uncond = velocity(x, t, cond.content, None)
    return v_uncond + cfg_scale * (v_cond - v_uncond)


@torch.no_grad()
def sample_rf(model, cond: Conditions, sampler: SamplerConfig, latent_shape: tuple[int, ...] | None = None,
              x0: torch.Tensor | None = None) -> torch.Tensor:
    """Integrates x from t=0 (noise) to t=1 in ``sampler.steps`` uniform Euler steps.

    ``model`` is either a GlyphGenerator (its DiT is used and its decoder is not) or
    a bare callable ``v(x_t, t, content, style)``.
    """
    velocity = model.velocity if hasattr(model, "velocity") else model
    if sampler.cfg_scale != 1.0 and cond.style is not None:
        supports = getattr(model, "supports_uncond", None)
        if supports is not None and not bool(supports):
            raise ConfigurationError(
                "model was trained without condition dropout; guidance needs cfg_scale == 1"
            )
    if x0 is None:
        if latent_shape is None:
            cfg = model.cfg.model
            b, n = cond.content.shape[:2]
            latent_shape = (b, n, cfg.latent_channels, cfg.latent_side, cfg.latent_side)
        x0 = initial_noise(latent_shape, sampler.seed, cond.content.dtype)
    x = x0.clone()
    dt = 1.0 / sampler.steps
    for i in range(sampler.steps):
        t = torch.full((x.shape[0],), i * dt, dtype=x.dtype)
        x = x + dt * guided_velocity(velocity, x, t, cond, sampler.cfg_scale)
    return x


@torch.no_grad()
def sample_rgba(model, cond: Conditions, sampler: SamplerConfig) -> torch.Tensor:
    """Samples latents and decodes them; returns (B, n, 4, H, W) RGBA in [0, 1]."""
    return model.decode(sample_rf(model, cond, sampler))
