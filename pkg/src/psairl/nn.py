"""Small ReLU multilayer perceptrons with exact hand-written gradients.

All parameters of a network live in one flat float64 vector; layer weights
and biases are views into it. Forward passes accept a single input vector
or a batch of row vectors. Backward returns the gradient of ``sum(dy * y)``
with respect to the flat parameters and the input.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch

HIDDEN = (32, 32)


def param_count(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def unflatten(sizes: Sequence[int], flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into ``(W, b)`` views, ``W`` shaped ``(fan_out, fan_in)``."""
    if flat.shape != (param_count(sizes),):
        raise DimensionMismatch(f"flat vector has shape {flat.shape}, expected ({param_count(sizes)},)")
    layers, k = [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = flat[k : k + fan_in * fan_out].reshape(fan_out, fan_in)
        k += fan_in * fan_out
        b = flat[k : k + fan_out]
        k += fan_out
        layers.append((W, b))
    return layers


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


@dataclass(frozen=True)
class MlpParams:
    sizes: tuple[int, ...]
    flat: np.ndarray

    def __post_init__(self) -> None:
        flat = np.array(self.flat, dtype=np.float64)
        if flat.shape != (param_count(self.sizes),):
            raise DimensionMismatch(f"MlpParams: {flat.shape} does not fit sizes {self.sizes}")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    @property
    def d_in(self) -> int:
        return self.sizes[0]

    @property
    def d_out(self) -> int:
        return self.sizes[-1]

    @property
    def size(self) -> int:
        return self.flat.size

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.sizes, self.flat)

    def with_flat(self, flat: np.ndarray) -> "MlpParams":
        return MlpParams(self.sizes, flat)

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "params": self.flat.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        return cls(tuple(d["sizes"]), np.array(d["params"], dtype=np.float64))


def mlp_init(d_in: int, d_out: int, seed: int, hidden: Sequence[int] = HIDDEN) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if d_in < 1 or d_out < 1:
        raise ValueError("mlp_init: dimensions must be >= 1")
    sizes = (d_in, *hidden, d_out)
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return MlpParams(sizes, flatten(layers))


@dataclass
class Cache:
    inputs: list[np.ndarray]  # input to each affine layer, batched
    pre: list[np.ndarray]  # pre-activation of each hidden layer
    squeeze: bool


def mlp_forward(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, Cache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != p.d_in:
        raise DimensionMismatch(f"input shape {x.shape} does not match d_in={p.d_in}")
    layers = p.layers()
    inputs, pre = [], []
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W.T + b
        if i < len(layers) - 1:
            pre.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    return (h[0] if squeeze else h), Cache(inputs, pre, squeeze)


def mlp_backward(p: MlpParams, cache: Cache, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(dx, grad)`` for the scalar ``sum(dy * y)``; relu'(0) is taken as 0."""
    dy = np.asarray(dy, dtype=np.float64)
    g = dy[None, :] if cache.squeeze else dy
    layers = p.layers()
    if g.shape != (cache.inputs[0].shape[0], p.d_out):
        raise DimensionMismatch(f"dy shape {dy.shape} does not match forward output")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[i] = (g.T @ cache.inputs[i], g.sum(axis=0))
        g = g @ W
        if i > 0:
            g = g * (cache.pre[i - 1] > 0.0)
    dx = g[0] if cache.squeeze else g
    return dx, flatten(grads)


def mlp_jvp(p: MlpParams, cache: Cache, v: np.ndarray) -> np.ndarray:
    """Directional derivative of the outputs along parameter direction ``v``."""
    if v.shape != (p.size,):
        raise DimensionMismatch(f"direction shape {v.shape}, expected ({p.size},)")
    layers = p.layers()
    dirs = unflatten(p.sizes, v)
    dh = np.zeros_like(cache.inputs[0])
    for i, ((W, _), (dW, db)) in enumerate(zip(layers, dirs)):
        dz = dh @ W.T + cache.inputs[i] @ dW.T + db
        if i < len(layers) - 1:
            dh = dz * (cache.pre[i] > 0.0)
        else:
            dh = dz
    return dh[0] if cache.squeeze else dh


def sgd_step(p: MlpParams, grad: np.ndarray, lr: float) -> MlpParams:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != p.flat.shape:
        raise DimensionMismatch(f"gradient shape {grad.shape} vs params {p.flat.shape}")
    return p.with_flat(p.flat - lr * grad)


class Adam:
    """Adam moment state for one parameter vector; ``step`` returns new params."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, p: MlpParams, grad: np.ndarray) -> MlpParams:
        if grad.shape != self.m.shape:
            raise DimensionMismatch(f"gradient shape {grad.shape} vs optimizer state {self.m.shape}")
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return p.with_flat(p.flat - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def make_optimizer(kind: str, size: int, lr: float):
    """``"sgd"`` (plain gradient descent) or ``"adam"``; both expose ``step(p, grad)``."""
    if kind == "adam":
        return Adam(size, lr)
    if kind == "sgd":
        return _Sgd(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, p: MlpParams, grad: np.ndarray) -> MlpParams:
        return sgd_step(p, grad, self.lr)


def save_checkpoint(path, nets: dict[str, MlpParams], scale: np.ndarray, extra: dict | None = None) -> None:
    """JSON checkpoint: named networks plus the feature-normalization divisors."""
    doc = {"networks": {k: v.to_dict() for k, v in nets.items()}, "feature_scale": np.asarray(scale).tolist()}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[dict[str, MlpParams], np.ndarray, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    nets = {k: MlpParams.from_dict(v) for k, v in doc.pop("networks").items()}
    scale = np.array(doc.pop("feature_scale"), dtype=np.float64)
    return nets, scale, doc
