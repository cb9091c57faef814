"""Small module system: named parameters, buffers, and a few layers."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            value.name = name
            self._params[name] = value
        elif value is None:
            self._params.pop(name, None)
            self._children.pop(name, None)
        object.__setattr__(self, name, value)

    def __delattr__(self, name):
        self._params.pop(name, None)
        self._buffers.pop(name, None)
        self._children.pop(name, None)
        object.__delattr__(self, name)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            raise KeyError(name)
        self.register_buffer(name, value)

    def named_children(self):
        return self._children.items()

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data.copy()
        for name, b in self.named_buffers():
            out[name] = np.asarray(b).copy()
        return out

    def _locate(self, dotted: str):
        *path, leaf = dotted.split(".")
        mod = self
        for part in path:
            mod = mod._children[part]
        return mod, leaf

    def load_state_dict(self, state, strict: bool = True) -> list[str]:
        """Copies arrays in place; returns names present in the model but absent from ``state``."""
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        unexpected = [k for k in state if k not in own and k not in bufs]
        if unexpected:
            raise KeyError(f"unexpected keys in state: {unexpected}")
        missing = [k for k in list(own) + list(bufs) if k not in state]
        if strict and missing:
            raise KeyError(f"missing keys in state: {missing}")
        for k, arr in state.items():
            arr = np.asarray(arr)
            if k in own:
                if own[k].shape != arr.shape:
                    raise F.DimensionError(f"{k}: expected {own[k].shape}, got {arr.shape}")
                own[k].data[...] = arr
            else:
                mod, leaf = self._locate(k)
                if np.shape(bufs[k]) != arr.shape:
                    raise F.DimensionError(f"{k}: expected {np.shape(bufs[k])}, got {arr.shape}")
                mod.set_buffer(leaf, arr.astype(np.float32).copy())
        return missing


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # gain sqrt(2) with the leaky slope ignored, as in the usual "relu" setting
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, padding: int = 1,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.W = Tensor(_kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel),
                        requires_grad=True)

    @property
    def out_channels(self) -> int:
        return self.W.shape[0]

    def __call__(self, x):
        return F.conv2d(x, self.W, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator | None = None, bias: bool = True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.W = Tensor(_kaiming_uniform(rng, (out_f, in_f), in_f), requires_grad=True)
        self.b = Tensor(np.zeros(out_f, dtype=np.float32), requires_grad=True) if bias else None

    def reset(self, rng: np.random.Generator) -> None:
        out_f, in_f = self.W.shape
        self.W.data[...] = _kaiming_uniform(rng, (out_f, in_f), in_f)
        if self.b is not None:
            self.b.data[...] = 0.0

    def __call__(self, x):
        return F.linear(x, self.W, self.b)


class TwoLayerPerceptron(Module):
    """linear(C->C) -> leaky_relu -> linear(C->C)."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, slope: float = 0.01,
                 bias: bool = True):
        super().__init__()
        self.slope = slope
        self.fc1 = Linear(channels, channels, rng, bias)
        self.fc2 = Linear(channels, channels, rng, bias)

    def __call__(self, x):
        return self.fc2(F.leaky_relu(self.fc1(x), self.slope))


class Normalizer(Module):
    """Shared statistics state of a normalization layer (no affine factors).

    Batch mode keeps running mean/var (momentum 0.1, biased variance) that are
    used outside training; group mode is stateless.
    """

    def __init__(self, channels: int, mode: str = "batch", groups: int = 4, momentum: float = 0.1,
                 eps: float = F.EPS):
        super().__init__()
        if mode not in ("batch", "group"):
            raise ValueError(f"unknown normalization mode {mode!r}")
        if mode == "group" and channels % groups:
            raise F.DimensionError(f"{channels} channels not divisible by {groups} groups")
        self.mode, self.groups, self.momentum, self.eps = mode, groups, momentum, eps
        self.channels = channels
        if mode == "batch":
            self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
            self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def __call__(self, x: Tensor, update: bool = True) -> Tensor:
        if x.shape[1] != self.channels:
            raise F.DimensionError(f"normalizer for {self.channels} channels got {x.shape}")
        if self.mode == "batch" and not self.training:
            xhat, _, _ = F.normalize(x, "batch", eps=self.eps, running=(self.running_mean, self.running_var))
            return xhat
        xhat, mu, var = F.normalize(x, self.mode, self.groups, self.eps)
        if self.mode == "batch" and update:
            m = self.momentum
            self.set_buffer("running_mean", ((1 - m) * self.running_mean + m * mu).astype(np.float32))
            self.set_buffer("running_var", ((1 - m) * self.running_var + m * var).astype(np.float32))
        return xhat


class Norm2d(Module):
    """Plain normalization layer with learned affine factors."""

    def __init__(self, channels: int, mode: str = "batch", groups: int = 4):
        super().__init__()
        self.stats = Normalizer(channels, mode, groups)
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return F.affine(self.stats(x), self.gamma, self.beta)
