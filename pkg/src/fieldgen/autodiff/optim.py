from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import NumericError
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        weight_decay: float = 0.01,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.state = OptimizerState(
            lr=lr,
            betas=tuple(betas),
            weight_decay=weight_decay,
            eps=eps,
            exp_avg=[np.zeros_like(p.data) for p in self.params],
            exp_avg_sq=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient at optimizer step {st.step + 1}")
            grads.append(g)
        st.step += 1
        b1, b2 = st.betas
        bc1 = 1.0 - b1**st.step
        bc2 = 1.0 - b2**st.step
        for p, g, m, v in zip(self.params, grads, st.exp_avg, st.exp_avg_sq):
            if st.weight_decay:
                p.data *= 1.0 - st.lr * st.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            denom = np.sqrt(v / bc2) + st.eps
            p.data -= (st.lr / bc1) * m / denom

    # checkpoint support
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.state.exp_avg, self.state.exp_avg_sq)):
            out[f"exp_avg.{i:04d}"] = m
            out[f"exp_avg_sq.{i:04d}"] = v
        return out

    def state_meta(self) -> dict:
        st = self.state
        return {
            "lr": st.lr,
            "betas": list(st.betas),
            "weight_decay": st.weight_decay,
            "eps": st.eps,
            "step": st.step,
            "n_params": len(self.params),
        }

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        if meta["n_params"] != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        st = self.state
        st.lr = meta["lr"]
        st.betas = tuple(meta["betas"])
        st.weight_decay = meta["weight_decay"]
        st.eps = meta["eps"]
        st.step = meta["step"]
        for i, p in enumerate(self.params):
            m = arrays[f"exp_avg.{i:04d}"]
            v = arrays[f"exp_avg_sq.{i:04d}"]
            if m.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"moment buffer {i} shape mismatch")
            st.exp_avg[i] = m.astype(p.data.dtype, copy=True)
            st.exp_avg_sq[i] = v.astype(p.data.dtype, copy=True)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = total**0.5
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm
