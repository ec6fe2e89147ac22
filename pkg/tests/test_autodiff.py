import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fieldgen.autodiff import (
    MASK_VALUE,
    AdamW,
    Tensor,
    conv2d,
    embedding,
    grad_check,
    layer_norm,
    matmul,
    precision,
    softmax,
    upsample_nearest,
)
from fieldgen.errors import DimensionError, NumericError


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                c[i, j] += a[i, t] * b[t, j]
    return c


def naive_conv(x, w, stride, pad):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                s = 0.0
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            s += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = s
    return out


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32)
    out = matmul(Tensor(a), Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_case():
    out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(4, 3))
    out = matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, naive_matmul(a, b), atol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_backward_formula():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    dc = rng.normal(size=(3, 2)).astype(np.float32)
    matmul(a, b).backward(dc)
    np.testing.assert_allclose(a.grad, dc @ b.data.T, rtol=1e-6)
    np.testing.assert_allclose(b.grad, a.data.T @ dc, rtol=1e-6)


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = np.random.default_rng(2).normal(size=(1, 6, 6)).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_constant_image():
    x = np.full((1, 7, 7), 0.75)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_allclose(out.data, 9 * 0.75)
    assert out.shape == (1, 5, 5)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_direct_summation(stride, pad):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 8, 8))
    w = rng.normal(size=(4, 2, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, naive_conv(x, w, stride, pad), atol=1e-5)


def test_conv_rejects_dropped_input():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 8, 8))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=0)


def test_conv_rejects_even_kernel():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 8, 8))), Tensor(np.zeros((1, 1, 2, 2))))


# ---------------------------------------------------------------- softmax


def test_softmax_constant_row():
    out = softmax(Tensor(np.full((1, 4), 3.0)))
    np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-7)


def test_softmax_large_logits():
    out = softmax(Tensor([[1000.0, 0.0]]))
    assert np.isfinite(out.data).all()
    assert out.data[0, 0] == pytest.approx(1.0)
    assert out.data[0, 1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_matches_formula():
    row = np.random.default_rng(4).normal(size=7)
    out = softmax(Tensor(row[None])).data[0]
    ref = np.exp(row) / np.exp(row).sum()
    np.testing.assert_allclose(out, ref, atol=1e-6)
    assert abs(out.sum() - 1.0) <= 1e-6


def test_softmax_empty_row():
    with pytest.raises(DimensionError):
        softmax(Tensor(np.zeros((2, 0))))


@settings(max_examples=60, deadline=None)
@given(
    logits=arrays(np.float64, (3, 6), elements=st.floats(-50, 50)),
    keep=arrays(np.bool_, (3, 6)),
)
def test_softmax_rows_sum_to_one_with_masks(logits, keep):
    keep[:, 0] = True
    mask = np.where(keep, 0.0, MASK_VALUE)
    out = softmax(Tensor(logits), mask).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert (out >= 0).all()
    assert np.all(out[~keep] < 1e-30)


# ------------------------------------------------------------- layer norm


def test_layer_norm_constant_row():
    out = layer_norm(Tensor(np.full((1, 5), 2.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_normalized_row():
    out = layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_matches_formula():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 8))
    g = rng.normal(size=8)
    b = rng.normal(size=8)
    out = layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b
    np.testing.assert_allclose(out, ref, atol=1e-5)


# --------------------------------------------------------------- gradients


def test_grad_check_square_sum():
    x = Tensor(np.random.default_rng(6).normal(size=5), requires_grad=True)
    assert grad_check(lambda: (x * x).sum(), [x]) <= 1e-8


def test_grad_check_matmul_softmax_composite():
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    r = rng.normal(size=(3, 3))
    err = grad_check(lambda: (softmax(matmul(a, b)) * r).sum(), [a, b])
    assert err <= 1e-4


def test_grad_check_rejects_non_finite():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    with pytest.raises(NumericError):
        grad_check(lambda: x.log().sum(), [x])


GRAD_CASES = {
    "add_broadcast": lambda a, b, r: ((a + b[0]) * r).sum(),
    "sub_mul": lambda a, b, r: ((a - b) * (a * b) * r).sum(),
    "div": lambda a, b, r: (a / (b * b + 1.0) * r).sum(),
    "pow_exp": lambda a, b, r: ((a**2).exp() * r * 0.1).sum(),
    "log_sqrt": lambda a, b, r: (((a * a + 1.0).log() + (b * b + 0.5).sqrt()) * r).sum(),
    "tanh_sigmoid": lambda a, b, r: ((a.tanh() + b.sigmoid()) * r).sum(),
    "silu_gelu": lambda a, b, r: ((a.silu() + b.gelu()) * r).sum(),
    "abs": lambda a, b, r: ((a + 3.0).abs() * r).sum(),
    "reduce_mean": lambda a, b, r: (a.mean(axis=0) * b.sum(axis=0, keepdims=True) * r[0]).sum(),
    "reshape_transpose_slice": lambda a, b, r: (a.reshape(4, 3).transpose()[1:, ::2] * 2.0).sum(),
    "softmax_masked": lambda a, b, r: (softmax(a, np.array([0.0, 0.0, MASK_VALUE, 0.0])) * r).sum(),
    "layer_norm": lambda a, b, r: (layer_norm(a, b[0], b[1]) * r).sum(),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_elementary_gradients(name):
    rng = np.random.default_rng(8)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    r = rng.normal(size=(3, 4))
    assert grad_check(lambda: GRAD_CASES[name](a, b, r), [a, b]) <= 1e-4


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_gradients(stride, pad):
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    bias = Tensor(rng.normal(size=3), requires_grad=True)
    out_shape = conv2d(x, w, bias, stride, pad).shape
    r = rng.normal(size=out_shape)
    err = grad_check(lambda: (conv2d(x, w, bias, stride, pad) * r).sum(), [x, w, bias])
    assert err <= 1e-4


def test_upsample_and_embedding_gradients():
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    table = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    idx = np.array([[0, 3], [3, 4]])
    r1 = rng.normal(size=(2, 6, 6))
    r2 = rng.normal(size=(2, 2, 4))
    err = grad_check(
        lambda: (upsample_nearest(x) * r1).sum() + (embedding(table, idx) * r2).sum(), [x, table]
    )
    assert err <= 1e-4


def test_precision_mode_produces_float64():
    with precision(np.float64):
        t = Tensor([1.0, 2.0])
        assert t.data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        Tensor([1e38]) * Tensor([1e38])


# ------------------------------------------------------------------ adamw


def test_adamw_zero_lr_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.0)
    p.grad = np.array([0.5, 0.5], dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_decay_only():
    p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5), rtol=1e-7)


def test_adamw_single_step_formula():
    with precision(np.float64):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW([p], lr=1e-3)
        p.grad = np.array([1.0])
        opt.step()
    lr, wd, b1, b2, eps = 1e-3, 0.01, 0.9, 0.999, 1e-8
    m_hat = (1 - b1) * 1.0 / (1 - b1)
    v_hat = (1 - b2) * 1.0 / (1 - b2)
    expected = 1.0 * (1 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + eps)
    assert abs(p.data[0] - expected) <= 1e-10
    assert opt.state.step == 1


def test_adamw_nan_grad_aborts_step():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    q = Tensor(np.array([3.0]), requires_grad=True)
    opt = AdamW([q, p], lr=0.1)
    q.grad = np.array([1.0], dtype=np.float32)
    p.grad = np.array([np.nan, 0.0], dtype=np.float32)
    with pytest.raises(NumericError):
        opt.step()
    np.testing.assert_array_equal(q.data, [3.0])
    assert opt.state.step == 0
