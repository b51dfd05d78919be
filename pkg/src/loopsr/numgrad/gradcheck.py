from __future__ import annotations

import math
from typing import Callable

import numpy as np

from loopsr.numgrad.layers import ParamSet
from loopsr.numgrad.tensor import NumericalError, Tensor, backward


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def analytic_grads(f: Callable[[ParamSet], Tensor], params: ParamSet) -> dict[str, np.ndarray]:
    params.zero_grad()
    loss = f(params)
    backward(loss)
    grads = {k: g.copy() for k, g in params.grads().items()}
    params.zero_grad()
    return grads


def _scalar(f, params) -> float:
    v = f(params)
    v = float(v.data) if isinstance(v, Tensor) else float(v)
    if not math.isfinite(v):
        raise NumericalError("grad_check", "objective is not finite")
    return v


def grad_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    h: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
    grads: dict[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``max_coords`` caps the number of coordinates probed per parameter (chosen
    with ``seed``); ``None`` probes every coordinate.  ``grads`` overrides the
    reverse-mode gradients, which lets callers test the detector itself.

    A coordinate whose absolute disagreement is below the rounding noise of the
    difference quotient (``10 eps max(|f|, 1) / h``) counts as agreeing; this
    covers parameters with an exactly zero gradient, such as attention key
    biases.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if grads is None:
        grads = analytic_grads(f, params)
    rng = np.random.default_rng(seed)
    noise = 10 * np.finfo(np.float64).eps * max(abs(_scalar(f, params)), 1.0) / h
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        g = np.asarray(grads[name]).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f, params)
            flat[i] = orig - h
            fm = _scalar(f, params)
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            if abs(g[i] - fd) <= noise:
                continue
            worst = max(worst, float(relative_error(g[i], fd)))
    return worst
