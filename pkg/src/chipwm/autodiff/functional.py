"""Differentiable operators used by the passport layers and their losses."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

EPS = 1e-5


class DimensionError(ValueError):
    pass


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKK kernel."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    N, C, H, W = x.shape
    O, _, K, _ = weight.shape
    Ho, Wo = (H + 2 * padding - K) // stride + 1, (W + 2 * padding - K) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: kernel {K} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * K * K)
    wmat = weight.data.reshape(O, C * K * K)
    out = (cols @ wmat.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        dw = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ wmat).reshape(N, Ho, Wo, C, K, K)
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(K):
            for j in range(K):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        return dx, dw

    return Tensor._make(np.ascontiguousarray(out), (x, weight), back)


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    x = _as_tensor(x)
    stride = stride or kernel
    N, C, H, W = x.shape
    Ho, Wo = (H - kernel) // stride + 1, (W - kernel) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"avg_pool2d: kernel {kernel} larger than input {x.shape}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    out = win.mean(axis=(-2, -1))
    scale = 1.0 / (kernel * kernel)

    def back(g):
        dx = np.zeros(x.shape, dtype=x.dtype)
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gs
        return (dx,)

    return Tensor._make(np.ascontiguousarray(out, dtype=x.dtype), (x,), back)


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Adaptive average pooling to 1x1: (N, C, H, W) -> (N, C)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"adaptive_avg_pool expects NCHW, got {x.shape}")
    return x.mean(axis=(2, 3))


def pooling_matrix(length: int, bins: int, dtype=np.float32) -> np.ndarray:
    """Averaging matrix of 1-D adaptive pooling: bin i covers [floor(iL/n), ceil((i+1)L/n))."""
    mat = np.zeros((bins, length), dtype=dtype)
    for i in range(bins):
        lo = (i * length) // bins
        hi = -((-(i + 1) * length) // bins)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def adaptive_avg_pool1d(x: Tensor, bins: int) -> Tensor:
    """Pools a flattened tensor down to ``bins`` values."""
    x = _as_tensor(x)
    flat = x.reshape(x.size, 1)
    mat = Tensor(pooling_matrix(x.size, bins, x.dtype))
    return (mat @ flat).reshape(bins)


# --------------------------------------------------------------------------
# dense ops


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    x, weight = _as_tensor(x), _as_tensor(weight)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, x.size)
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out.reshape(out.shape[1]) if squeeze else out


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return _as_tensor(x).leaky_relu(slope)


# --------------------------------------------------------------------------
# normalization


def normalize(x: Tensor, mode: str = "batch", groups: int = 1, eps: float = EPS,
              running: tuple | None = None):
    """Standardize NCHW features; returns (x_hat, mean, var) with per-channel mean/var.

    ``running`` = (mean, var) arrays switches batch mode to inference statistics.
    Group mode always normalizes per sample and group.
    """
    x = _as_tensor(x)
    N, C, H, W = x.shape
    if mode == "batch":
        if running is not None:
            mu = Tensor(running[0].reshape(1, C, 1, 1).astype(x.dtype))
            var = Tensor(running[1].reshape(1, C, 1, 1).astype(x.dtype))
            return (x - mu) / (var + eps).sqrt(), running[0], running[1]
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        xhat = centered / (var + eps).sqrt()
        return xhat, mu.data.reshape(C), var.data.reshape(C)
    if mode == "group":
        if C % groups:
            raise DimensionError(f"group norm: {C} channels not divisible by {groups} groups")
        xg = x.reshape(N, groups, C // groups, H, W)
        mu = xg.mean(axis=(2, 3, 4), keepdims=True)
        centered = xg - mu
        var = (centered * centered).mean(axis=(2, 3, 4), keepdims=True)
        xhat = (centered / (var + eps).sqrt()).reshape(N, C, H, W)
        return xhat, None, None
    raise ValueError(f"unknown normalization mode {mode!r}")


def affine(xhat: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    C = xhat.shape[1]
    if gamma.size != C or beta.size != C:
        raise DimensionError(f"affine factors of length {gamma.size}/{beta.size} for {C} channels")
    return xhat * gamma.reshape(1, C, 1, 1) + beta.reshape(1, C, 1, 1)


def batch_stats_norm(x_w: Tensor, gamma: Tensor, beta: Tensor, mode: str = "batch",
                     groups: int = 1, eps: float = EPS) -> Tensor:
    xhat, _, _ = normalize(x_w, mode, groups, eps)
    return affine(xhat, _as_tensor(gamma), _as_tensor(beta))


# --------------------------------------------------------------------------
# losses


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_loss: {a.shape} vs {b.shape}")
    return (a - b).abs().mean()


def hinge_sum(v: Tensor, signs, tau: float = 0.1) -> Tensor:
    """sum_i max(tau - sign_i * v_i, 0)."""
    v = _as_tensor(v)
    s = np.asarray(signs, dtype=v.dtype).reshape(v.shape)
    return (Tensor(s) * v * -1.0 + tau).relu().sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.exp(log_softmax(data))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a).flatten(), _as_tensor(b).flatten()
    if a.size != b.size:
        raise DimensionError(f"cosine similarity of sizes {a.size} and {b.size}")
    dot = (a * b).sum()
    return dot / (((a * a).sum() * (b * b).sum()).sqrt() + 1e-12)
