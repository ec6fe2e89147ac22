"""Convolutional variational autoencoder with 8x spatial compression."""

from __future__ import annotations

import numpy as np

from .autodiff import AdamW, Tensor, as_tensor, l1, no_grad, upsample_nearest
from .config import VaeConfig
from .errors import DimensionError
from .nn import Conv2d, Module


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected CxHxW or BxCxHxW, got shape {x.shape}")
    return x, False


def _check_extents(x: Tensor, factor: int) -> None:
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"spatial extents {h}x{w} are not divisible by {factor}")


class ConvEncoder(Module):
    """Stem conv, ``stages`` stride-2 convs doubling the width, then a 1x1 head."""

    def __init__(self, cin: int, base: int, stages: int, cout: int, rng: np.random.Generator):
        self.stem = Conv2d(cin, base, 3, rng)
        self.downs = [Conv2d(base * 2**i, base * 2 ** (i + 1), 3, rng, stride=2) for i in range(stages)]
        self.head = Conv2d(base * 2**stages, cout, 1, rng)
        self.factor = 2**stages

    def forward(self, x: Tensor) -> Tensor:
        _check_extents(x, self.factor)
        h = self.stem(x).silu()
        for conv in self.downs:
            h = conv(h).silu()
        return self.head(h)


class VAE(Module):
    def __init__(self, cfg: VaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        base, s, lat = cfg.base_width, cfg.stages, cfg.latent_channels
        self.encoder = ConvEncoder(cfg.in_channels, base, s, 2 * lat, rng)
        self.dec_in = Conv2d(lat, base * 2**s, 3, rng)
        self.ups = [Conv2d(base * 2 ** (i + 1), base * 2**i, 3, rng) for i in reversed(range(s))]
        self.dec_out = Conv2d(base, cfg.in_channels, 3, rng)

    def encode(self, x) -> tuple[Tensor, Tensor]:
        """Return ``(mu, logvar)``, each latent_channels x H/8 x W/8."""
        x, single = _batched(x)
        if x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"expected {self.cfg.in_channels} channels, got {x.shape[1]}")
        h = self.encoder(x)
        lat = self.cfg.latent_channels
        mu, logvar = h[:, :lat], h[:, lat:]
        if single:
            return mu.reshape(mu.shape[1:]), logvar.reshape(logvar.shape[1:])
        return mu, logvar

    def decode(self, z) -> Tensor:
        """Latent to image in [0, 1], 8x the latent extents."""
        z, single = _batched(z)
        if z.shape[1] != self.cfg.latent_channels:
            raise DimensionError(f"expected {self.cfg.latent_channels} latent channels, got {z.shape[1]}")
        h = self.dec_in(z).silu()
        for conv in self.ups:
            h = conv(upsample_nearest(h, 2)).silu()
        out = self.dec_out(h).sigmoid()
        return out.reshape(out.shape[1:]) if single else out

    def forward(self, x, noise=None) -> tuple[Tensor, Tensor, Tensor]:
        mu, logvar = self.encode(x)
        z = mu if noise is None else reparameterize(mu, logvar, noise)
        return self.decode(z), mu, logvar


def reparameterize(mu, logvar, noise) -> Tensor:
    """z = mu + exp(logvar / 2) * noise."""
    mu, logvar, noise = as_tensor(mu), as_tensor(logvar), as_tensor(noise)
    if not (mu.shape == logvar.shape == noise.shape):
        raise DimensionError(f"shape mismatch: mu {mu.shape}, logvar {logvar.shape}, noise {noise.shape}")
    return mu + (logvar * 0.5).exp() * noise


def kl_divergence(mu, logvar) -> Tensor:
    """KL(N(mu, e^logvar) || N(0, 1)) summed over latent dims, averaged over batch.

    Inputs with 4 axes are treated as batches; anything else is one item.
    """
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise DimensionError(f"shape mismatch: mu {mu.shape}, logvar {logvar.shape}")
    batch = mu.shape[0] if mu.ndim == 4 else 1
    return (mu.square() + logvar.exp() - 1.0 - logvar).sum() * (0.5 / batch)


def vae_loss(vae: VAE, x, noise, kl_weight: float) -> tuple[Tensor, Tensor, Tensor]:
    recon, mu, logvar = vae(x, noise)
    rec = l1(recon, x)
    kl = kl_divergence(mu, logvar)
    # KL is per item; normalize by pixel count so the weight is resolution-free
    return rec + kl * (kl_weight / float(np.prod(x.shape[1:]))), rec, kl


def pretrain_vae(
    vae: VAE,
    images: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    kl_weight: float,
    rng: np.random.Generator,
    optimizer: AdamW | None = None,
) -> list[float]:
    """Fit the autoencoder on ``images`` (N x 3 x H x W); returns per-epoch mean L1."""
    opt = optimizer or AdamW(vae.parameters(), lr=lr, weight_decay=0.0)
    history = []
    n = len(images)
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = Tensor(images[idx])
            mu_shape = (len(idx), vae.cfg.latent_channels, x.shape[2] // 8, x.shape[3] // 8)
            noise = rng.standard_normal(mu_shape).astype(np.float32)
            opt.zero_grad()
            total, rec, _ = vae_loss(vae, x, noise, kl_weight)
            total.backward()
            opt.step()
            losses.append(float(rec.data))
        history.append(float(np.mean(losses)) if losses else 0.0)
    return history


def reconstruction_l1(vae: VAE, images: np.ndarray, batch_size: int = 16) -> float:
    """Mean L1 of decode(encode mean) against the inputs."""
    errs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = images[start : start + batch_size]
            mu, _ = vae.encode(Tensor(x))
            errs.append(np.abs(vae.decode(mu).data - x).mean() * len(x))
    return float(np.sum(errs) / len(images))
