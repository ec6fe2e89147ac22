"""Conditional prior: boundary conditions straight to a latent estimate,
plus the epoch-decayed blend between true and prior latents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor
from .config import VaeConfig
from .errors import DimensionError, ParameterError
from .nn import Module
from .vae import ConvEncoder, _batched

COND_CHANNELS = 9


class PriorEncoder(Module):
    """Mirror of the autoencoder's encoder with 9 input channels and a
    deterministic output of latent width."""

    def __init__(self, cfg: VaeConfig, rng: np.random.Generator):
        self.net = ConvEncoder(COND_CHANNELS, cfg.base_width, cfg.stages, cfg.latent_channels, rng)

    def forward(self, cond) -> Tensor:
        return encode_prior(self, cond)


def encode_prior(prior: PriorEncoder, cond) -> Tensor:
    x, single = _batched(cond)
    if x.shape[1] != COND_CHANNELS:
        raise DimensionError(f"condition tensor needs {COND_CHANNELS} channels, got {x.shape[1]}")
    z = prior.net(x)
    return z.reshape(z.shape[1:]) if single else z


@dataclass(frozen=True)
class BlendSchedule:
    horizon: int = 1000
    floor: float = 0.0
    ceiling: float = 1.0


def alpha(n: int, schedule: BlendSchedule = BlendSchedule()) -> float:
    """Weight on the true latent at epoch ``n``: clamp(1 - n/N, floor, ceiling)."""
    if n < 0:
        raise ParameterError(f"epoch index must be >= 0, got {n}")
    return float(min(schedule.ceiling, max(schedule.floor, 1.0 - n / schedule.horizon)))


def blend_latents(z_true, z_prior, a: float):
    """a * z_true + (1 - a) * z_prior; works on arrays and tensors alike."""
    if not 0.0 <= a <= 1.0:
        raise ParameterError(f"blend weight {a} outside [0, 1]")
    if isinstance(z_true, Tensor) or isinstance(z_prior, Tensor):
        z_true, z_prior = as_tensor(z_true), as_tensor(z_prior)
    if z_true.shape != z_prior.shape:
        raise DimensionError(f"shape mismatch: {z_true.shape} vs {z_prior.shape}")
    if a == 1.0:
        return z_true
    if a == 0.0:
        return z_prior
    return z_true * a + z_prior * (1.0 - a)
