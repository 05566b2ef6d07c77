"""Tiny MLP building blocks and optimizers on top of :mod:`igdslab.ndnum`."""
from __future__ import annotations

import hashlib

import numpy as np

from . import ndnum as nd
from .ndnum import Tensor


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True)
    return w, b


def activate(h: Tensor, activation: str, sharpness: float = 3.0) -> Tensor:
    if activation == "softplus":
        return nd.softplus(h, sharpness)
    if activation == "relu":
        return nd.relu(h)
    raise ValueError(f"unknown activation {activation!r}")


class MLP:
    """Fully connected net; the activation is skipped after the last layer."""

    def __init__(self, sizes, rng: np.random.Generator, activation: str = "relu", sharpness: float = 3.0):
        self.sizes = list(sizes)
        self.activation = activation
        self.sharpness = sharpness
        self.layers = [init_linear(rng, a, b) for a, b in zip(self.sizes[:-1], self.sizes[1:])]

    def __call__(self, x) -> Tensor:
        h = nd.as_tensor(x)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w + b
            if i < last:
                h = activate(h, self.activation, self.sharpness)
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]


def set_trainable(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
        p.grad = None


def copy_into(dst, src) -> None:
    for d, s in zip(dst, src):
        d.data = s.data.copy()


def param_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


class SGD:
    def __init__(self, params, lr: float = 1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
