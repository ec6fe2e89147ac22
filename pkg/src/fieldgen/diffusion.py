"""Noise schedule, forward corruption, the composite training loss,
classifier-free guidance and the deterministic DDIM sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, conv2d, l1, mse, no_grad
from .config import LossWeightsConfig, SampleConfig
from .dit import DiffusionTransformer, drop_conditions
from .errors import ParameterError
from .nn import Conv2d, Module
from .prior import BlendSchedule, PriorEncoder, alpha, blend_latents
from .vae import VAE

LOSS_TERMS = ("l_diff", "l_recon", "l_edge", "l_perc", "l_prior")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if t.dtype.kind not in "iu" or (t < 0).any() or (t >= self.T).any():
            raise ParameterError(f"timestep {t} outside [0, {self.T})")
        return t

    def alpha_bar(self, t) -> np.ndarray:
        """ᾱ_t with the convention ᾱ_{-1} = 1 (fully clean)."""
        t = np.asarray(t)
        if t.dtype.kind not in "iu" or (t < -1).any() or (t >= self.T).any():
            raise ParameterError(f"timestep {t} outside [-1, {self.T})")
        return np.where(t < 0, 1.0, self.alpha_bars[np.maximum(t, 0)])


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 2:
        raise ParameterError("T must be >= 2")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def _coef(values: np.ndarray, like) -> np.ndarray:
    """Per-sample coefficients shaped to broadcast over a (B, ...) tensor.

    A scalar timestep applies to everything; a vector indexes the batch axis.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape((-1,) + (1,) * (len(like.shape) - 1))


def _cast(arr: np.ndarray, like):
    return arr.astype(like.data.dtype if isinstance(like, Tensor) else np.asarray(like).dtype)


def q_sample(z0, t, eps, sched: NoiseSchedule):
    """z_t = sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps."""
    t = sched.check_t(t)
    ab = sched.alpha_bars[t]
    a = _cast(_coef(np.sqrt(ab), z0), z0)
    b = _cast(_coef(np.sqrt(1.0 - ab), z0), z0)
    return z0 * a + eps * b


def predict_x0(z_t, t, eps_hat, sched: NoiseSchedule):
    """ẑ0 = (z_t - sqrt(1 - ᾱ_t) ε̂) / sqrt(ᾱ_t)."""
    t = sched.check_t(t)
    ab = sched.alpha_bars[t]
    b = _cast(_coef(np.sqrt(1.0 - ab), z_t), z_t)
    inv = _cast(_coef(1.0 / np.sqrt(ab), z_t), z_t)
    return (z_t - eps_hat * b) * inv


def cfg_combine(eps_uncond, eps_cond, w: float):
    """ε_u + w (ε_c - ε_u), written so that w = 0 and w = 1 return the branches exactly."""
    return eps_uncond * (1.0 - w) + eps_cond * w


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced descending sub-sequence, e.g. 960, 920, ..., 0 for (1000, 25)."""
    if steps < 1 or steps > T:
        raise ParameterError(f"steps must lie in [1, {T}]")
    stride = T // steps
    return (np.arange(steps) * stride)[::-1].astype(np.int64)


def ddim_step(z_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic update to ``t_prev`` (``-1`` means the clean endpoint)."""
    if t_prev >= t:
        raise ParameterError(f"DDIM steps must decrease: t={t}, t_prev={t_prev}")
    z0 = predict_x0(z_t, t, eps_hat, sched)
    ab_prev = float(sched.alpha_bar(t_prev))
    if ab_prev == 1.0:
        return z0
    return z0 * float(np.sqrt(ab_prev)) + eps_hat * float(np.sqrt(1.0 - ab_prev))


# ------------------------------------------------------------ loss helpers
_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL = np.stack([_SOBEL_X, _SOBEL_X.T])[:, None]  # (2, 1, 3, 3): d/dx, d/dy


def sobel_magnitude(x) -> Tensor:
    """Gradient magnitude of the channel mean, B x 1 x H x W."""
    x = as_tensor(x)
    gray = x.mean(axis=1, keepdims=True)
    g = conv2d(gray, Tensor(_SOBEL), pad=1)
    return (g.square().sum(axis=1, keepdims=True) + 1e-12).sqrt()


class PerceptualPyramid(Module):
    """Frozen random conv features at three scales (seed-fixed)."""

    def __init__(self, seed: int = 1234, widths=(8, 16, 32)):
        rng = np.random.default_rng(seed)
        chans = (3,) + tuple(widths)
        self.stages = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2) for i in range(len(widths))]
        self.freeze()

    def features(self, x) -> list[Tensor]:
        feats, h = [], as_tensor(x)
        for conv in self.stages:
            h = conv(h).relu()
            feats.append(h)
        return feats

    def distance(self, a, b) -> Tensor:
        fb = [f.detach() for f in self.features(b)]
        terms = [mse(fa, f) for fa, f in zip(self.features(a), fb)]
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total * (1.0 / len(terms))


# ---------------------------------------------------------------- the model
class FieldGenModel(Module):
    """Autoencoder, conditional prior and diffusion transformer."""

    def __init__(self, vae: VAE, prior: PriorEncoder, dit: DiffusionTransformer, latent_scale: float = 1.0):
        self.vae = vae
        self.prior = prior
        self.dit = dit
        self.latent_scale = float(latent_scale)

    def encode_latent(self, images) -> Tensor:
        """Scaled autoencoder mean of target images (no gradient)."""
        with no_grad():
            mu, _ = self.vae.encode(as_tensor(images))
        return Tensor(mu.data * np.float32(self.latent_scale))

    def decode_latent(self, z) -> Tensor:
        return self.vae.decode(as_tensor(z) * (1.0 / self.latent_scale))


@dataclass
class LossContext:
    sched: NoiseSchedule
    weights: LossWeightsConfig
    blend: BlendSchedule
    perceptual: PerceptualPyramid
    cfg_dropout: float = 0.1
    x0_clip: float = 4.0


def weighted_total(terms: dict[str, Tensor], weights: LossWeightsConfig) -> Tensor:
    w = {"l_diff": weights.diff, "l_recon": weights.recon, "l_edge": weights.edge,
         "l_perc": weights.perc, "l_prior": weights.prior}
    total = None
    for name in LOSS_TERMS:
        if name not in terms:
            continue
        term = terms[name] * w[name]
        total = term if total is None else total + term
    return total


def total_loss(
    batch: dict,
    model: FieldGenModel,
    ctx: LossContext,
    epoch: int,
    rng: np.random.Generator,
) -> tuple[Tensor, dict[str, float]]:
    """Composite objective for one batch.

    ``batch`` holds ``cond`` (B x 9 x H x W) and ``target`` (B x 3 x H x W);
    ``z_true`` (scaled latent means) is used when present. Random draws
    (timesteps, noise, guidance dropout) come from ``rng`` in a fixed order.
    """
    cond = np.asarray(batch["cond"], dtype=np.float32)
    target = np.asarray(batch["target"], dtype=np.float32)
    z_true = batch.get("z_true")
    z_true = model.encode_latent(target) if z_true is None else Tensor(z_true)
    b = target.shape[0]

    t = rng.integers(0, ctx.sched.T, size=b)
    eps = rng.standard_normal(z_true.shape).astype(np.float32)
    drop = rng.random(b) < ctx.cfg_dropout

    a = alpha(epoch, ctx.blend)
    z_prior = model.prior(cond)
    z_mixed = blend_latents(z_true, z_prior, a)
    z_t = q_sample(z_mixed, t, eps, ctx.sched)

    c = drop_conditions(model.dit, model.dit.encode_conditions(cond), drop)
    eps_hat = model.dit(z_t, t, c)

    z0_hat = predict_x0(z_t, t, eps_hat, ctx.sched).clip(-ctx.x0_clip, ctx.x0_clip)
    x_hat = model.decode_latent(z0_hat)
    terms = {
        "l_diff": mse(eps_hat, eps),
        "l_recon": l1(x_hat, target),
        "l_edge": l1(sobel_magnitude(x_hat), sobel_magnitude(target).detach()),
        "l_perc": ctx.perceptual.distance(x_hat, target),
        "l_prior": mse(z_prior, z_true.detach()),
    }
    total = weighted_total(terms, ctx.weights)
    breakdown = {k: float(v.data) for k, v in terms.items()}
    breakdown["total"] = float(total.data)
    breakdown["alpha"] = a
    return total, breakdown


# ------------------------------------------------------------------ sampler
def guided_eps(model: DiffusionTransformer, z, t: int, c, null, w: float) -> np.ndarray:
    eps_c = model(z, t, c).data
    if w == 1.0:
        return eps_c
    eps_u = model(z, t, null).data
    return cfg_combine(eps_u, eps_c, w)


def sample_latent(
    cond,
    cfg: SampleConfig,
    model: FieldGenModel,
    sched: NoiseSchedule,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Run the guided DDIM chain and return the final ẑ0 (B x C x h x w).

    The starting latent is ``noise`` if given, else a unit normal draw seeded
    by ``cfg.seed``. Condition tokens are encoded once and reused at every step.
    """
    cond = np.asarray(cond, dtype=np.float32)
    if cond.ndim == 3:
        cond = cond[None]
    dit = model.dit
    b, _, h, w = cond.shape
    shape = (b, dit.latent_channels, h // 8, w // 8)
    if noise is None:
        noise = np.random.default_rng(cfg.seed).standard_normal(shape)
    z = np.asarray(noise, dtype=np.float32).reshape(shape)
    with no_grad():
        c = dit.encode_conditions(cond)
        null = dit.null_tokens
        steps = ddim_timesteps(sched.T, cfg.steps)
        prevs = np.append(steps[1:], -1)
        for t, t_prev in zip(steps, prevs):
            eps = guided_eps(dit, z, int(t), c, null, cfg.guidance)
            z = ddim_step(z, eps, int(t), int(t_prev), sched)
    return z


def sample(
    cond,
    cfg: SampleConfig,
    model: FieldGenModel,
    sched: NoiseSchedule,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Field images in [0, 1] for one (9 x H x W) or a batch of condition tensors."""
    cond = np.asarray(cond, dtype=np.float32)
    z0 = sample_latent(cond, cfg, model, sched, noise)
    with no_grad():
        img = model.decode_latent(z0).data
    return img[0] if cond.ndim == 3 else img
