"""Diffusion transformer over latent patches.

Each block runs multi-scale neighbourhood self-attention (with a learned
pairwise spatial bias on the logits), cross-attention from patch tokens to
the three boundary-condition tokens, and an MLP, all pre-normalized with
residual connections.
"""

from __future__ import annotations

import math
from collections import Counter
from contextlib import contextmanager
from typing import Iterator

import numpy as np

from .autodiff import MASK_VALUE, Tensor, as_tensor, concat, embedding, softmax
from .config import DiTConfig
from .errors import ConfigError, DimensionError
from .nn import Conv2d, LayerNorm, Linear, Module, parameter

GEOMETRY_EPS = 1e-8
N_COND_TOKENS = 3


# ----------------------------------------------------------------- auditing
class _Audit:
    """Counters for instrumented call sites; only active inside :func:`audit`."""

    def __init__(self):
        self.active = False
        self.counts: Counter = Counter()

    def add(self, key: str, n: int = 1) -> None:
        if self.active:
            self.counts[key] += n


AUDIT = _Audit()


@contextmanager
def audit() -> Iterator[Counter]:
    """Count injection points and condition-token encodes inside the block.

    Keys: ``injection_points`` (patch x condition-token pairs per cross-attention
    call, per sample), ``cross_attention_calls``, ``condition_encodes``.
    """
    prev_active, prev_counts = AUDIT.active, AUDIT.counts
    AUDIT.active, AUDIT.counts = True, Counter()
    try:
        yield AUDIT.counts
    finally:
        AUDIT.active, AUDIT.counts = prev_active, prev_counts


# -------------------------------------------------------------- patch tokens
def patch_size(latent_hw: int, g: int) -> int:
    if latent_hw % g:
        raise DimensionError(f"latent extent {latent_hw} not divisible by grid {g}")
    return latent_hw // g


def patchify(z, g: int) -> Tensor:
    """Partition B x C x h x w into B x g^2 x (C p p) row-major patches."""
    z = as_tensor(z)
    b, c, h, w = z.shape
    if h != w:
        raise DimensionError(f"latent must be square, got {h}x{w}")
    p = patch_size(h, g)
    x = z.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * p * p)


def unpatchify(tokens, g: int, channels: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    tokens = as_tensor(tokens)
    b, n, f = tokens.shape
    if n != g * g:
        raise DimensionError(f"expected {g * g} tokens, got {n}")
    p = int(round(math.sqrt(f / channels)))
    if channels * p * p != f:
        raise DimensionError(f"token width {f} is not channels x p^2 for channels={channels}")
    x = tokens.reshape(b, g, g, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, g * p, g * p)


def grid_coords(g: int) -> np.ndarray:
    """p_i = (row, col) = (i // g, i % g) for i in 0..g^2-1."""
    i = np.arange(g * g)
    return np.stack([i // g, i % g], axis=1).astype(np.float64)


def sincos_position_embedding(g: int, d: int) -> np.ndarray:
    """Fixed 2D sine-cosine embedding, half the width per grid axis."""
    if d % 4:
        raise ConfigError("position embedding width must be divisible by 4")
    coords = grid_coords(g)
    quarter = d // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    parts = []
    for axis in (0, 1):
        ang = coords[:, axis : axis + 1] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


# ----------------------------------------------------------- spatial bias
def pairwise_geometry(g: int, eps: float = GEOMETRY_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Distances d_ij (g^2 x g^2) and directions (p_i - p_j)/(d_ij + eps) (g^2 x g^2 x 2)."""
    if g < 2:
        raise ConfigError("grid side must be >= 2")
    p = grid_coords(g)
    diff = p[:, None, :] - p[None, :, :]
    d = np.sqrt((diff**2).sum(axis=-1))
    return d, diff / (d[..., None] + eps)


def n_distance_buckets(g: int) -> int:
    return math.ceil((g - 1) * math.sqrt(2.0) - 1e-12) + 1


def neighborhood_masks(g: int, scales) -> dict[int, np.ndarray]:
    """mask_k[i, j] is True iff the Chebyshev distance of p_i and p_j is <= k."""
    if not scales or min(scales) < 1:
        raise ConfigError("scales must be positive")
    p = grid_coords(g)
    cheb = np.abs(p[:, None, :] - p[None, :, :]).max(axis=-1)
    return {int(k): cheb <= k for k in scales}


class SpatialBias(Module):
    """Fusion of distance features, direction features and a distance-bucket
    table into one additive logit bias per head. The last layer starts at zero."""

    def __init__(self, g: int, heads: int, hidden: int, rng: np.random.Generator):
        self.g = g
        self.d1 = Linear(1, hidden, rng)
        self.d2 = Linear(hidden, hidden, rng)
        self.u1 = Linear(2, hidden, rng)
        self.u2 = Linear(hidden, hidden, rng)
        self.table = parameter(rng.normal(0.0, 0.02, size=(n_distance_buckets(g), hidden)))
        self.fuse = Linear(3 * hidden, hidden, rng)
        self.out = Linear(hidden, heads, rng, zero=True)

    def forward(self, d_ij: np.ndarray, u_ij: np.ndarray) -> Tensor:
        n = d_ij.shape[0]
        buckets = np.floor(d_ij).astype(np.int64)
        if buckets.max() >= self.table.shape[0]:
            raise ConfigError(
                f"distance bucket {buckets.max()} exceeds the {self.table.shape[0]}-entry table"
            )
        fd = self.d2(self.d1(Tensor(d_ij.reshape(n * n, 1))).silu())
        fu = self.u2(self.u1(Tensor(u_ij.reshape(n * n, 2))).silu())
        fr = embedding(self.table, buckets.reshape(-1))
        s = self.fuse(concat([fd, fu, fr], axis=1)).silu()
        return self.out(s).reshape(n, n, -1).transpose(2, 0, 1)


def spatial_bias(d_ij: np.ndarray, u_ij: np.ndarray, params: SpatialBias) -> Tensor:
    return params(d_ij, u_ij)


# ---------------------------------------------------------------- attention
def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def additive_mask(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, MASK_VALUE)


def attend(q: Tensor, k: Tensor, v: Tensor, mask=None, bias=None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k) + bias, masked) v over the last two axes."""
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        logits = logits + bias
    w = softmax(logits, None if mask is None else additive_mask(mask))
    return w @ v, w


class MultiScaleAttention(Module):
    def __init__(self, dim: int, heads: int, n_scales: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.fuse = Linear(n_scales * dim, dim, rng)

    def forward(self, x: Tensor, masks: list[np.ndarray], bias=None) -> Tensor:
        return multiscale_attention(x, masks, bias, self)


def multiscale_attention(x: Tensor, masks, bias, params: MultiScaleAttention) -> Tensor:
    """Masked attention per scale with a shared projection, fused by a linear
    layer over the concatenated scale outputs. The residual is the caller's."""
    x = as_tensor(x)
    d = x.shape[-1]
    qkv = params.qkv(x)
    q, k, v = (_split_heads(qkv[..., i * d : (i + 1) * d], params.heads) for i in range(3))
    outs = [_merge_heads(attend(q, k, v, m, bias)[0]) for m in masks]
    return params.fuse(concat(outs, axis=-1))


class CrossAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def forward(self, p: Tensor, c: Tensor, mask=None) -> Tensor:
        return cross_attention(p, c, self, mask)[0]


def cross_attention(p, c, params: CrossAttention, mask=None) -> tuple[Tensor, Tensor]:
    """Queries from patch tokens, keys/values from condition tokens.

    ``mask`` (bool, broadcastable to patches x conditions) hides condition
    tokens. Returns the output projection and the attention weights.
    """
    p, c = as_tensor(p), as_tensor(c)
    if p.shape[-1] != c.shape[-1]:
        raise DimensionError(f"token widths differ: {p.shape[-1]} vs {c.shape[-1]}")
    AUDIT.add("cross_attention_calls")
    AUDIT.add("injection_points", p.shape[-2] * c.shape[-2])
    q = _split_heads(params.q(p), params.heads)
    k = _split_heads(params.k(c), params.heads)
    v = _split_heads(params.v(c), params.heads)
    out, w = attend(q, k, v, mask)
    return params.o(_merge_heads(out)), w


# ---------------------------------------------------------- condition tokens
class StreamEncoder(Module):
    """Strided convs down to an 8x8 map, flattened, projected and normalized to one token.

    The final layer norm keeps sparse inputs (a small sketch on an empty
    canvas) from producing tokens far smaller than the patch tokens.
    """

    def __init__(self, image_size: int, width: int, dim: int, rng: np.random.Generator):
        stages = int(round(math.log2(image_size / 8)))
        if 8 * 2**stages != image_size:
            raise ConfigError(f"image size {image_size} must be 8 * 2^k")
        self.stem = Conv2d(3, width, 3, rng)
        self.downs = [Conv2d(width, width, 3, rng, stride=2) for _ in range(stages)]
        self.proj = Linear(width * 64, dim, rng)
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        h = self.stem(x).silu()
        for conv in self.downs:
            h = conv(h).silu()
        return self.norm(self.proj(h.reshape(h.shape[0], -1)))


class ConditionEncoder(Module):
    def __init__(self, image_size: int, width: int, dim: int, rng: np.random.Generator):
        self.streams = [StreamEncoder(image_size, width, dim, rng) for _ in range(N_COND_TOKENS)]

    def forward(self, cond) -> Tensor:
        return encode_condition_tokens(cond, self)


def encode_condition_tokens(cond, params: ConditionEncoder) -> Tensor:
    """Sketch, edge and spatial-reference tokens (B x 3 x d, or 3 x d)."""
    x = as_tensor(cond)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3 * N_COND_TOKENS:
        raise DimensionError(f"condition tensor needs 9 channels, got shape {x.shape}")
    AUDIT.add("condition_encodes", x.shape[0])
    toks = [enc(x[:, 3 * i : 3 * i + 3]) for i, enc in enumerate(params.streams)]
    out = concat([t.reshape(t.shape[0], 1, -1) for t in toks], axis=1)
    return out.reshape(out.shape[1:]) if single else out


# ------------------------------------------------------------ time embedding
def sinusoidal_features(t, d: int) -> np.ndarray:
    """[sin(t f_k), cos(t f_k)] with log-spaced f_k = 10000^(-k/(d/2))."""
    if d % 2:
        raise ConfigError("timestep embedding width must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class TimestepEmbedding(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.l1 = Linear(dim, dim, rng)
        self.l2 = Linear(dim, dim, rng)

    def forward(self, t) -> Tensor:
        return timestep_embedding(t, self.dim, self)


def timestep_embedding(t, d: int, params: TimestepEmbedding) -> Tensor:
    return params.l2(params.l1(Tensor(sinusoidal_features(t, d))).silu())


# -------------------------------------------------------------------- model
class Block(Module):
    def __init__(self, cfg: DiTConfig, rng: np.random.Generator):
        d = cfg.dim
        self.norm1 = LayerNorm(d)
        self.attn = MultiScaleAttention(d, cfg.heads, len(cfg.scales), rng)
        self.norm2 = LayerNorm(d)
        self.cross = CrossAttention(d, cfg.heads, rng)
        self.norm3 = LayerNorm(d)
        self.mlp1 = Linear(d, cfg.mlp_ratio * d, rng)
        self.mlp2 = Linear(cfg.mlp_ratio * d, d, rng)

    def forward(self, x: Tensor, c: Tensor, masks, bias) -> Tensor:
        x = x + self.attn(self.norm1(x), masks, bias)
        x = x + self.cross(self.norm2(x), c)
        return x + self.mlp2(self.mlp1(self.norm3(x)).gelu())


class DiffusionTransformer(Module):
    """Noise predictor for latents of ``latent_channels x latent_size^2``,
    conditioned on boundary images of side ``image_size``."""

    def __init__(
        self,
        cfg: DiTConfig,
        latent_channels: int,
        latent_size: int,
        image_size: int,
        rng: np.random.Generator,
    ):
        self.cfg = cfg
        self.latent_channels = latent_channels
        p = patch_size(latent_size, cfg.grid)
        patch_dim = latent_channels * p * p
        d = cfg.dim
        self.patch_in = Linear(patch_dim, d, rng)
        self.time = TimestepEmbedding(d, rng)
        self.cond_encoder = ConditionEncoder(image_size, cfg.cond_width, d, rng)
        self.null_tokens = parameter(rng.normal(0.0, 0.02, size=(N_COND_TOKENS, d)))
        self.bias = SpatialBias(cfg.grid, cfg.heads, cfg.spatial_hidden, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.depth)]
        self.norm_out = LayerNorm(d)
        self.head = Linear(d, patch_dim, rng, zero=True)
        # constants derived from the config
        self.pos = sincos_position_embedding(cfg.grid, d).astype(np.float32)
        self.geometry = pairwise_geometry(cfg.grid)
        masks = neighborhood_masks(cfg.grid, cfg.scales)
        self.masks = [masks[k] for k in cfg.scales]

    def encode_conditions(self, cond) -> Tensor:
        return encode_condition_tokens(cond, self.cond_encoder)

    def forward(self, z_t, t, c) -> Tensor:
        return dit_forward(z_t, t, c, self)


def null_condition(model: DiffusionTransformer, batch: int | None) -> Tensor:
    if batch is None:
        return model.null_tokens
    return model.null_tokens.reshape(1, N_COND_TOKENS, -1) * np.ones((batch, 1, 1), dtype=np.float32)


def drop_conditions(model: DiffusionTransformer, c: Tensor, drop: np.ndarray) -> Tensor:
    """Swap in the null tokens for batch items where ``drop`` is True."""
    m = np.asarray(drop, dtype=np.float32).reshape(-1, 1, 1)
    if not m.any():
        return c
    return c * (1.0 - m) + model.null_tokens.reshape(1, N_COND_TOKENS, -1) * m


def dit_forward(z_t, t, c, model: DiffusionTransformer) -> Tensor:
    """Predict the noise in ``z_t`` at timestep(s) ``t`` given condition tokens ``c``."""
    z = as_tensor(z_t)
    c = as_tensor(c)
    single = z.ndim == 3
    if single:
        z = z.reshape((1,) + z.shape)
    if c.ndim == 2:
        c = c.reshape((1,) + c.shape)
    if z.ndim != 4 or z.shape[1] != model.latent_channels:
        raise DimensionError(f"latent shape {z.shape} does not match {model.latent_channels} channels")
    b = z.shape[0]
    if c.shape[0] not in (1, b) or c.shape[1:] != (N_COND_TOKENS, model.cfg.dim):
        raise DimensionError(f"condition tokens {c.shape} do not fit batch {b} and width {model.cfg.dim}")
    t = np.broadcast_to(np.asarray(t), (b,))
    g = model.cfg.grid

    x = model.patch_in(patchify(z, g)) + model.pos
    x = x + model.time(t).reshape(b, 1, -1)
    bias = model.bias(*model.geometry)
    for block in model.blocks:
        x = block(x, c, model.masks, bias)
    eps = unpatchify(model.head(model.norm_out(x)), g, model.latent_channels)
    return eps.reshape(eps.shape[1:]) if single else eps
