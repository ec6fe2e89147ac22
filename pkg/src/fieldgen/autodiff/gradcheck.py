from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError
from .tensor import Tensor, precision


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` is re-evaluated with each coordinate of each tensor in ``params``
    nudged by ``±eps``; everything runs in float64. ``max_coords`` limits the
    number of (randomly chosen, seeded) coordinates probed per tensor. The
    relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    saved = [(p.data, p.requires_grad) for p in params]
    try:
        with precision(np.float64):
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = None
                p.requires_grad = True
            out = f()
            if out.size != 1:
                raise ValueError("grad_check needs a scalar function")
            out.backward()
            analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

            worst = 0.0
            for p, ga in zip(params, analytic):
                flat = p.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = f().item()
                    flat[i] = orig - eps
                    fm = f().item()
                    flat[i] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise NumericError("function value not finite during grad_check")
                    num = (fp - fm) / (2.0 * eps)
                    a = ga.reshape(-1)[i]
                    err = abs(a - num) / max(abs(a), abs(num), floor)
                    worst = max(worst, err)
    finally:
        for p, (d, rg) in zip(params, saved):
            p.data = d
            p.grad = None
            p.requires_grad = rg
    return float(worst)
