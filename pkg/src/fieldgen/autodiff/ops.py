"""Differentiable kernels built on :class:`Tensor`: attention softmax,
layer normalization, 2D convolution, nearest upsampling, table lookup and
the usual regression losses."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .tensor import Tensor, as_tensor

MASK_VALUE = -1e9


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive logit mask.

    ``mask`` is a constant array broadcastable to ``x``; use ``MASK_VALUE``
    for excluded positions and 0 elsewhere.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax needs a non-empty last dimension")
    z = x.data if mask is None else x.data + mask.astype(x.data.dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return Tensor._make(out, (x, gamma, beta), backward, "layer_norm")


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    """Output extent of a strided convolution.

    Raises when the window grid would silently skip a real (non-padding)
    input row or column.
    """
    span = n + 2 * pad - k
    if span < 0:
        raise DimensionError(f"kernel {k} larger than padded extent {n + 2 * pad}")
    if span % stride > pad:
        raise DimensionError(
            f"extent {n} with kernel {k}, stride {stride}, pad {pad} leaves input unused"
        )
    return span // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Direct cross-correlation.

    ``x`` is (N, Cin, H, W) or (Cin, H, W); ``weight`` is (Cout, Cin, kh, kw)
    with odd kernel extents.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects (N,C,H,W) input and (Cout,Cin,kh,kw) kernel")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"kernel expects {wcin} input channels, got {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("kernel extents must be odd")
    ho = conv_output_extent(h, kh, stride, pad)
    wo = conv_output_extent(w, kw, stride, pad)

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[
                        :, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride
                    ] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    result = Tensor._make(np.ascontiguousarray(out), parents, backward, "conv2d")
    if unbatched:
        result = result.reshape(result.shape[1:])
    return result


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    x = as_tensor(x)
    y = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    shape = x.shape

    def backward(g):
        g = g.reshape(shape[:-2] + (shape[-2], factor, shape[-1], factor))
        return (g.sum(axis=(-3, -1)),)

    return Tensor._make(y, (x,), backward, "upsample")


def embedding(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]`` with scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise DimensionError("embedding index out of range")

    def backward(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor._make(table.data[index], (table,), backward, "embedding")


def mse(a: Tensor, b) -> Tensor:
    d = as_tensor(a) - b
    return (d * d).mean()


def l1(a: Tensor, b) -> Tensor:
    return (as_tensor(a) - b).abs().mean()
