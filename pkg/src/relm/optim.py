"""Adam with bias correction, global-norm clipping, and the inverse-sqrt schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def inv_sqrt_lr(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` at ``warmup``, then ``step ** -0.5`` decay."""
    if step < 1 or warmup < 1:
        raise ValueError(f"step and warmup must be >= 1 (got {step}, {warmup})")
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a list of :class:`~relm.tensor.Parameter`.

    Frozen parameters are skipped entirely (no moment buffers, no update).
    Gradients of every parameter are zeroed after each :meth:`step`.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, clip_norm=5.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        sq = 0.0
        for p in self.params:
            if p.trainable:
                sq += float(np.dot(p.grad.ravel().astype(np.float64), p.grad.ravel().astype(np.float64)))
        return math.sqrt(sq)

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        st = self.state
        st.step += 1
        scale = 1.0
        if self.clip_norm:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / (norm + 1e-6)
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**st.step
        corr2 = 1.0 - b2**st.step
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad if scale == 1.0 else p.grad * p.dtype.type(scale)
            m = st.m.get(p.name)
            if m is None:
                m = st.m[p.name] = np.zeros_like(p.data)
                st.v[p.name] = np.zeros_like(p.data)
            v = st.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / corr1
            v_hat = v / corr2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)
        self.zero_grad()

    def state_arrays(self) -> dict:
        out = {}
        for name in sorted(self.state.m):
            out[f"adam.m.{name}"] = self.state.m[name]
            out[f"adam.v.{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, step: int, arrays: dict):
        self.state = AdamState(step=step)
        for key, arr in arrays.items():
            kind, name = key[len("adam."):].split(".", 1)
            (self.state.m if kind == "m" else self.state.v)[name] = np.array(arr)
