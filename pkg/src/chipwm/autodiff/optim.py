from __future__ import annotations

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, dict):
        return list(params.items())
    out = []
    for i, p in enumerate(params):
        out.append(p if isinstance(p, tuple) else (p.name or f"param{i}", p))
    return out


class SGD:
    """Momentum SGD with coupled weight decay (g <- g + wd * w; v <- mu * v + g; w <- w - lr * v)."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = _named(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                v = self.velocity.get(id(p))
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[id(p)] = v
                g = v
            p.data -= (self.lr * g).astype(p.data.dtype)


def sgd_step(params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0, state: SGD | None = None) -> SGD:
    """One in-place update; pass the returned optimizer back in to keep velocity buffers."""
    opt = state or SGD(params, lr, momentum, weight_decay)
    opt.lr = lr
    opt.step()
    return opt


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = _named(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
            m = self.m.get(id(p), np.zeros_like(g))
            v = self.v.get(id(p), np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[id(p)], self.v[id(p)] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
