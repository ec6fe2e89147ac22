import itertools
import math

import numpy as np
import pytest

from fieldgen.autodiff import AdamW, Tensor, grad_check, precision
from fieldgen.config import DiTConfig
from fieldgen.dit import (
    ConditionEncoder,
    CrossAttention,
    DiffusionTransformer,
    MultiScaleAttention,
    SpatialBias,
    attend,
    audit,
    cross_attention,
    dit_forward,
    encode_condition_tokens,
    multiscale_attention,
    n_distance_buckets,
    neighborhood_masks,
    pairwise_geometry,
    patchify,
    sinusoidal_features,
    timestep_embedding,
    TimestepEmbedding,
    unpatchify,
)
from fieldgen.errors import ConfigError, DimensionError
from fieldgen.nn import Linear


def _rng(seed=0):
    return np.random.default_rng(seed)


# ------------------------------------------------------------------ patches
def test_patchify_paper_scale():
    z = np.zeros((1, 1024, 32, 32), dtype=np.float32)
    tok = patchify(z, 8)
    assert tok.shape == (1, 64, 1024 * 16)


def test_patch_token_locality():
    rng = _rng()
    z = rng.normal(size=(1, 4, 32, 32))
    proj = Linear(4 * 16, 8, rng)
    base = proj(patchify(z, 8)).data
    z2 = z.copy()
    z2[0, :, 31, 31] += 5.0
    moved = proj(patchify(z2, 8)).data
    np.testing.assert_array_equal(moved[0, 0], base[0, 0])
    assert not np.array_equal(moved[0, 63], base[0, 63])
    z3 = z.copy()
    z3[0, :, 3, 3] += 5.0
    assert not np.array_equal(proj(patchify(z3, 8)).data[0, 0], base[0, 0])


def test_token_order_row_major():
    z = np.zeros((1, 1, 8, 8))
    z[0, 0, 2, 6] = 1.0  # grid g=4, p=2: cell (1, 3) -> token 7
    tok = patchify(z, 4).data[0]
    assert np.flatnonzero(tok.any(axis=1)).tolist() == [7]


@pytest.mark.parametrize("c,hw,g", [(3, 8, 4), (5, 16, 8), (2, 12, 3)])
def test_patch_round_trip_with_identity_projection(c, hw, g):
    z = _rng(1).normal(size=(2, c, hw, hw))
    width = c * (hw // g) ** 2
    eye = Tensor(np.eye(width))
    tokens = patchify(z, g) @ eye
    np.testing.assert_array_equal(unpatchify(tokens @ eye, g, c).data, z.astype(np.float32))


def test_patchify_indivisible():
    with pytest.raises(DimensionError):
        patchify(np.zeros((1, 2, 10, 10)), 4)


# ----------------------------------------------------------------- geometry
def test_pairwise_geometry_cases():
    d, u = pairwise_geometry(8)
    assert d.shape == (64, 64) and u.shape == (64, 64, 2)
    assert (np.diag(d) == 0).all() and (u[np.arange(64), np.arange(64)] == 0).all()
    j = 3 * 8 + 4
    assert d[0, j] == pytest.approx(5.0)
    np.testing.assert_allclose(u[0, j], [-0.6, -0.8], atol=1e-8)
    assert d.max() == pytest.approx(7 * math.sqrt(2))


def test_bucket_count():
    assert n_distance_buckets(8) == 11
    assert n_distance_buckets(2) == 3


def test_spatial_bias_zero_at_init():
    sb = SpatialBias(8, 16, 32, _rng())
    bias = sb(*pairwise_geometry(8)).data
    assert bias.shape == (16, 64, 64)
    assert not bias.any()


def test_spatial_bias_diagonal_shared():
    rng = _rng(2)
    sb = SpatialBias(4, 3, 8, rng)
    sb.out.weight.data = rng.normal(size=sb.out.weight.shape).astype(np.float32)
    bias = sb(*pairwise_geometry(4)).data
    diag = bias[:, np.arange(16), np.arange(16)]
    np.testing.assert_array_equal(diag, np.broadcast_to(diag[:, :1], diag.shape))
    assert np.isfinite(bias).all()


def test_spatial_bias_bucket_overflow():
    sb = SpatialBias(4, 2, 8, _rng())
    with pytest.raises(ConfigError):
        sb(*pairwise_geometry(8))


# -------------------------------------------------------------------- masks
def _brute_force(g, k):
    cells = list(itertools.product(range(g), range(g)))
    m = np.zeros((g * g, g * g), dtype=bool)
    for i, (ri, ci) in enumerate(cells):
        for j, (rj, cj) in enumerate(cells):
            m[i, j] = max(abs(ri - rj), abs(ci - cj)) <= k
    return m


@pytest.mark.parametrize("g", [2, 3, 5, 8])
def test_masks_match_enumeration(g):
    masks = neighborhood_masks(g, (1, 2, 4))
    for k, m in masks.items():
        np.testing.assert_array_equal(m, _brute_force(g, k))
        assert m.diagonal().all()
    assert (masks[1] <= masks[2]).all() and (masks[2] <= masks[4]).all()


def test_mask_sizes_g8():
    m = neighborhood_masks(8, (1, 2, 4))
    assert m[1][0].sum() == 4
    assert m[1][3 * 8 + 3].sum() == 9
    sizes = m[4].sum(axis=1)
    assert sizes.min() >= 25 and sizes.max() <= 64
    assert m[4][3 * 8 + 3].sum() == 64


def test_masks_reject_nonpositive_scale():
    with pytest.raises(ConfigError):
        neighborhood_masks(4, (0, 1))


# ---------------------------------------------------------------- attention
def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def reference_global_attention(x, attn: MultiScaleAttention, n_scales: int) -> np.ndarray:
    """Unmasked multi-head attention written directly in numpy (float64)."""
    w_qkv = attn.qkv.weight.data.astype(np.float64)
    b_qkv = attn.qkv.bias.data.astype(np.float64)
    b, n, d = x.shape
    h = attn.heads
    qkv = x @ w_qkv + b_qkv
    q, k, v = (qkv[..., i * d : (i + 1) * d].reshape(b, n, h, d // h).transpose(0, 2, 1, 3) for i in range(3))
    w = _np_softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(d // h))
    a = (w @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    cat = np.concatenate([a] * n_scales, axis=-1)
    return cat @ attn.fuse.weight.data.astype(np.float64) + attn.fuse.bias.data.astype(np.float64)


@pytest.mark.parametrize("g,scales", [(4, (3, 4, 5)), (8, (7, 8, 9)), (3, (2,))])
def test_global_attention_equivalence(g, scales):
    rng = _rng(3)
    d, h = 16, 4
    attn = MultiScaleAttention(d, h, len(scales), rng)
    masks = list(neighborhood_masks(g, scales).values())
    x = rng.normal(size=(2, g * g, d))
    zero_bias = SpatialBias(g, h, 8, rng)(*pairwise_geometry(g))
    with precision(np.float64):
        got = multiscale_attention(x, masks, zero_bias, attn).data
    np.testing.assert_allclose(got, reference_global_attention(x, attn, len(scales)), atol=1e-6, rtol=0)


def test_self_only_mask_returns_values():
    rng = _rng(4)
    q, k, v = (Tensor(rng.normal(size=(1, 2, 9, 4))) for _ in range(3))
    out, w = attend(q, k, v, np.eye(9, dtype=bool))
    np.testing.assert_allclose(out.data, v.data, atol=1e-6)


def test_attention_weights_normalized_within_neighbourhood():
    rng = _rng(5)
    mask = neighborhood_masks(8, (1,))[1]
    q, k, v = (Tensor(rng.normal(size=(2, 4, 64, 8))) for _ in range(3))
    _, w = attend(q, k, v, mask)
    np.testing.assert_allclose((w.data * mask).sum(axis=-1), 1.0, atol=1e-6)
    assert not (w.data * ~mask).any()


def test_cross_attention_single_token():
    rng = _rng(6)
    ca = CrossAttention(8, 2, rng)
    p = rng.normal(size=(1, 16, 8))
    c = rng.normal(size=(1, 3, 8))
    keep = np.array([False, True, False])
    out, _ = cross_attention(p, c, ca, keep)
    value = (c[0, 1] @ ca.v.weight.data + ca.v.bias.data) @ ca.o.weight.data + ca.o.bias.data
    np.testing.assert_allclose(out.data[0], np.broadcast_to(value, (16, 8)), atol=1e-5)


def test_cross_attention_identical_tokens():
    rng = _rng(7)
    ca = CrossAttention(8, 2, rng)
    c = np.repeat(rng.normal(size=(1, 1, 8)), 3, axis=1)
    _, w = cross_attention(rng.normal(size=(1, 5, 8)), c, ca)
    np.testing.assert_allclose(w.data, 1 / 3, atol=1e-6)


def test_cross_attention_relabeling_symmetry():
    rng = _rng(8)
    ca = CrossAttention(8, 2, rng)
    p, c = rng.normal(size=(2, 5, 8)), rng.normal(size=(2, 3, 8))
    a = cross_attention(p, c, ca)[0].data
    b = cross_attention(p, c[:, [2, 0, 1]], ca)[0].data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_cross_attention_width_mismatch():
    ca = CrossAttention(8, 2, _rng())
    with pytest.raises(DimensionError):
        cross_attention(np.zeros((1, 4, 8)), np.zeros((1, 3, 6)), ca)


# --------------------------------------------------------- condition tokens
def test_condition_stream_isolation():
    rng = _rng(9)
    enc = ConditionEncoder(32, 4, 16, rng)
    cond = rng.random((9, 32, 32))
    base = encode_condition_tokens(cond, enc).data
    cut = cond.copy()
    cut[3:6] = 0.0
    moved = encode_condition_tokens(cut, enc).data
    assert base.shape == (3, 16)
    np.testing.assert_array_equal(moved[[0, 2]], base[[0, 2]])
    assert not np.array_equal(moved[1], base[1])
    np.testing.assert_array_equal(encode_condition_tokens(cond, enc).data, base)


def test_condition_tokens_paper_extent():
    enc = ConditionEncoder(256, 2, 1024, _rng())
    assert encode_condition_tokens(np.zeros((9, 256, 256), dtype=np.float32), enc).shape == (3, 1024)


def test_condition_channel_mismatch():
    enc = ConditionEncoder(32, 2, 8, _rng())
    with pytest.raises(DimensionError):
        encode_condition_tokens(np.zeros((6, 32, 32)), enc)


# ----------------------------------------------------------------- timestep
def test_timestep_features_at_zero():
    f = sinusoidal_features(0, 16)[0]
    np.testing.assert_array_equal(f[:8], 0.0)
    np.testing.assert_array_equal(f[8:], 1.0)


def test_timestep_embedding_distinct_and_deterministic():
    te = TimestepEmbedding(16, _rng())
    e1, e2 = timestep_embedding(1, 16, te).data, timestep_embedding(2, 16, te).data
    assert np.linalg.norm(e1 - e2) > 0
    np.testing.assert_array_equal(e1, timestep_embedding(1, 16, te).data)


def test_timestep_odd_width():
    with pytest.raises(ConfigError):
        sinusoidal_features(3, 7)


# -------------------------------------------------------------- full model
def tiny_dit(seed=0, g=4, d=32, depth=2, heads=4, latent=4, latent_size=4, image=32):
    cfg = DiTConfig(grid=g, dim=d, depth=depth, heads=heads, spatial_hidden=8, cond_width=4)
    return DiffusionTransformer(cfg, latent, latent_size, image, _rng(seed))


def randomize_zero_inits(model, rng):
    for lin in (model.head, model.bias.out):
        lin.weight.data = rng.normal(0, 0.2, size=lin.weight.shape).astype(np.float32)


def test_output_shape_and_zero_init():
    model = tiny_dit(latent_size=8)
    z = _rng(1).normal(size=(2, 4, 8, 8))
    c = _rng(2).normal(size=(2, 3, 32))
    eps = dit_forward(z, np.array([3, 500]), c, model)
    assert eps.shape == z.shape
    assert not eps.data.any()
    assert dit_forward(z[0], 7, c[0], model).shape == z.shape[1:]


def test_injection_audit_desk_like():
    model = tiny_dit(g=4, depth=3)
    with audit() as counts:
        dit_forward(np.zeros((4, 4, 4)), 0, np.zeros((3, 32)), model)
    assert counts["injection_points"] == 4 * 4 * 3 * 3
    assert counts["cross_attention_calls"] == 3


def test_dit_gradient_check():
    rng = _rng(10)
    model = tiny_dit()
    randomize_zero_inits(model, rng)
    z = rng.normal(size=(1, 4, 4, 4))
    c = rng.normal(size=(1, 3, 32))
    r = rng.normal(size=z.shape)

    def f():
        return (dit_forward(z, 17, c, model) * r).mean()

    params = [p for n, p in model.named_parameters() if not n.startswith(("cond_encoder", "null"))]
    # key biases shift every logit of a row equally, so their exact gradient is
    # zero; the floor keeps roundoff-vs-roundoff comparisons out of the ratio
    assert grad_check(f, params, eps=1e-5, max_coords=4, floor=1e-6) <= 1e-3


def test_condition_sensitivity_after_training_step():
    rng = _rng(11)
    model = tiny_dit()
    opt = AdamW(model.parameters(), lr=1e-2)
    z = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
    c = rng.normal(size=(2, 3, 32)).astype(np.float32)
    target = rng.normal(size=z.shape)
    loss = ((dit_forward(z, 5, c, model) - target) ** 2).mean()
    loss.backward()
    opt.step()
    a = dit_forward(z, 5, c, model).data
    b = dit_forward(z, 5, c + rng.normal(size=c.shape), model).data
    assert np.abs(a - b).max() > 0
