from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from loopsr.numgrad.layers import ParamSet
from loopsr.numgrad.tensor import ShapeError


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam step.

    Pure: returns new parameter arrays and a new state; inputs are not modified.
    Missing moment entries are treated as zeros (fresh state).
    """
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, w in params.items():
        g = grads[k]
        if np.shape(g) != np.shape(w):
            raise ShapeError(f"{k}: gradient shape {np.shape(g)} != parameter shape {np.shape(w)}")
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m, v = np.zeros_like(w), np.zeros_like(w)
        elif m.shape != np.shape(w):
            raise ShapeError(f"{k}: moment shape {m.shape} != parameter shape {np.shape(w)}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new_p[k] = w - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)


class Adam:
    """Stateful wrapper applying :func:`adam_update` to a :class:`ParamSet` in place."""

    def __init__(self, params: ParamSet, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: dict | None = None, max_grad_norm: float | None = None) -> float:
        grads = self.params.grads() if grads is None else grads
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        if max_grad_norm is not None and norm > max_grad_norm:
            scale = max_grad_norm / (norm + 1e-12)
            grads = {k: g * scale for k, g in grads.items()}
        new_p, self.state = adam_update(self.params.arrays(), grads, self.state)
        for k, w in new_p.items():
            self.params[k].data = w
        return norm
