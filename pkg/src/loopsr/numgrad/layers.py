"""Parameter containers and the network building blocks used across the package."""

from __future__ import annotations

import math

import numpy as np

from loopsr.errors import ConfigError
from loopsr.numgrad.tensor import ShapeError, Tensor, as_tensor, gelu, layer_norm, softmax


class ParamSet(dict):
    """Ordered mapping ``name -> Tensor`` of trainable leaves.

    Insertion order is the iteration order, so two sets built by the same code
    path enumerate their parameters identically.
    """

    def __setitem__(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not isinstance(value, Tensor):
            value = Tensor(value, requires_grad=True)
        value.requires_grad = True
        super().__setitem__(name, value)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self.items()}

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy values in place, keeping the existing Tensor objects."""
        if strict and set(arrays) != set(self):
            missing = sorted(set(self) - set(arrays))
            extra = sorted(set(arrays) - set(self))
            raise KeyError(f"parameter mismatch; missing={missing} unexpected={extra}")
        for k, v in arrays.items():
            if k not in self:
                continue
            if self[k].data.shape != np.shape(v):
                raise ShapeError(f"{k}: expected {self[k].data.shape}, got {np.shape(v)}")
            self[k].data[...] = v

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def num_values(self) -> int:
        return sum(t.data.size for t in self.values())


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


def affine_forward(x, W, b) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or b.shape != (W.shape[1],):
        raise ShapeError(f"weight {W.shape} and bias {b.shape} do not conform")
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} != weight rows {W.shape[0]}")
    if x.ndim == 1:
        raise ShapeError("affine_forward expects a batch axis")
    return x @ W + b


class Affine:
    def __init__(self, params: ParamSet, name: str, d_in: int, d_out: int, rng: np.random.Generator, gain=1.0):
        self.params, self.name = params, name
        params[f"{name}.W"] = xavier_uniform(rng, d_in, d_out) * gain
        params[f"{name}.b"] = np.zeros(d_out)

    def __call__(self, x) -> Tensor:
        p = self.params
        return affine_forward(x, p[f"{self.name}.W"], p[f"{self.name}.b"])


class LayerNorm:
    def __init__(self, params: ParamSet, name: str, d: int):
        self.params, self.name = params, name
        params[f"{name}.g"] = np.ones(d)
        params[f"{name}.b"] = np.zeros(d)

    def __call__(self, x) -> Tensor:
        p = self.params
        return layer_norm(as_tensor(x), p[f"{self.name}.g"], p[f"{self.name}.b"])


class MLP:
    """Affine layers with ``tanh`` or ``gelu`` between them (none after the last)."""

    def __init__(self, params, name, sizes, rng, activation="tanh", out_gain=1.0):
        if activation not in ("tanh", "gelu"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.activation = activation
        n = len(sizes) - 1
        self.layers = [
            Affine(params, f"{name}.{i}", sizes[i], sizes[i + 1], rng, gain=out_gain if i == n - 1 else 1.0)
            for i in range(n)
        ]

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = h.tanh() if self.activation == "tanh" else gelu(h)
        return h


def init_attention_params(params: ParamSet, prefix: str, d: int, rng: np.random.Generator, ff_mult: int = 4):
    for nm in ("q", "k", "v", "o"):
        params[f"{prefix}.W{nm}"] = xavier_uniform(rng, d, d)
        params[f"{prefix}.b{nm}"] = np.zeros(d)
    for nm in ("ln1", "ln2"):
        params[f"{prefix}.{nm}.g"] = np.ones(d)
        params[f"{prefix}.{nm}.b"] = np.zeros(d)
    params[f"{prefix}.W1"] = xavier_uniform(rng, d, ff_mult * d)
    params[f"{prefix}.b1"] = np.zeros(ff_mult * d)
    params[f"{prefix}.W2"] = xavier_uniform(rng, ff_mult * d, d)
    params[f"{prefix}.b2"] = np.zeros(d)


def attention_block(tokens, params: ParamSet, causal: bool, heads: int, prefix: str = "blk") -> Tensor:
    """Pre-norm transformer block: ``x + MHA(LN(x))`` then ``x + FFN(LN(x))``.

    ``tokens`` is ``[T, d]`` or ``[B, T, d]``; the output has the same shape.
    """
    x = as_tensor(tokens)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    B, T, d = x.shape
    if heads < 1 or d % heads:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    dh = d // heads
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731

    h = layer_norm(x, p("ln1.g"), p("ln1.b"))

    def split(t):
        return t.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    q = split(h @ p("Wq") + p("bq"))
    k = split(h @ p("Wk") + p("bk"))
    v = split(h @ p("Wv") + p("bv"))
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    mask = np.tril(np.ones((T, T), dtype=bool)) if causal else None
    att = softmax(scores, axis=-1, mask=mask)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    x = x + (o @ p("Wo") + p("bo"))

    h2 = layer_norm(x, p("ln2.g"), p("ln2.b"))
    x = x + (gelu(h2 @ p("W1") + p("b1")) @ p("W2") + p("b2"))
    return x.reshape(T, d) if squeeze else x
