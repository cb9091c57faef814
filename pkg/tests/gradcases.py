"""Central finite-difference checks for every differentiable op, shared by unit and acceptance tests."""

import numpy as np

from chipwm.autodiff import Tensor, precision
from chipwm.autodiff import functional as F
from chipwm.autodiff.tensor import concat, stack_sum

H = 1e-3
TOL = 1e-3


def _away_from_zero(rng, shape, lo=0.2):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _w(rng, shape):
    return rng.standard_normal(shape)


# name -> (input builder, function of the input tensors returning a Tensor)
CASES = {
    "add": (lambda r: [_w(r, (3, 4)), _w(r, (4,))], lambda a, b: a + b),
    "sub": (lambda r: [_w(r, (3, 4)), _w(r, (3, 1))], lambda a, b: a - b),
    "rsub": (lambda r: [_w(r, (5,))], lambda a: 2.0 - a),
    "neg": (lambda r: [_w(r, (5,))], lambda a: -a),
    "mul": (lambda r: [_w(r, (2, 3)), _w(r, (1, 3))], lambda a, b: a * b),
    "div": (lambda r: [_w(r, (2, 3)), _away_from_zero(r, (2, 3), 0.5)], lambda a, b: a / b),
    "rdiv": (lambda r: [_away_from_zero(r, (4,), 0.5)], lambda a: 3.0 / a),
    "pow": (lambda r: [r.uniform(0.5, 2.0, (4,))], lambda a: a ** 1.5),
    "matmul": (lambda r: [_w(r, (3, 4)), _w(r, (4, 2))], lambda a, b: a @ b),
    "sum_axis": (lambda r: [_w(r, (3, 4))], lambda a: a.sum(axis=1)),
    "mean_keepdims": (lambda r: [_w(r, (2, 3, 4))], lambda a: a.mean(axis=(0, 2), keepdims=True)),
    "reshape": (lambda r: [_w(r, (2, 6))], lambda a: a.reshape(3, 4) * Tensor(np.arange(12.0).reshape(3, 4))),
    "transpose": (lambda r: [_w(r, (2, 3, 4))],
                  lambda a: a.transpose(2, 0, 1) * Tensor(np.arange(24.0).reshape(4, 2, 3))),
    "exp": (lambda r: [_w(r, (5,))], lambda a: a.exp()),
    "log": (lambda r: [r.uniform(0.5, 2.0, (5,))], lambda a: a.log()),
    "sqrt": (lambda r: [r.uniform(0.5, 2.0, (5,))], lambda a: a.sqrt()),
    "abs": (lambda r: [_away_from_zero(r, (6,))], lambda a: a.abs()),
    "relu": (lambda r: [_away_from_zero(r, (6,))], lambda a: a.relu()),
    "leaky_relu": (lambda r: [_away_from_zero(r, (6,))], lambda a: F.leaky_relu(a, 0.01)),
    "concat": (lambda r: [_w(r, (2, 3)), _w(r, (2, 2))],
               lambda a, b: concat([a, b], axis=1) * Tensor(np.arange(10.0).reshape(2, 5))),
    "stack_sum": (lambda r: [_w(r, (3,)), _w(r, (3,)), _w(r, (3,))], lambda a, b, c: stack_sum([a, b * b, c])),
    "conv2d": (lambda r: [_w(r, (2, 3, 6, 6)), _w(r, (4, 3, 3, 3))], lambda x, w: F.conv2d(x, w, 1, 1)),
    "conv2d_stride": (lambda r: [_w(r, (1, 2, 7, 7)), _w(r, (3, 2, 3, 3))], lambda x, w: F.conv2d(x, w, 2, 0)),
    "avg_pool2d": (lambda r: [_w(r, (2, 2, 6, 6))], lambda x: F.avg_pool2d(x, 2)),
    "avg_pool2d_overlap": (lambda r: [_w(r, (1, 2, 5, 5))], lambda x: F.avg_pool2d(x, 3, 1)),
    "adaptive_avg_pool": (lambda r: [_w(r, (2, 3, 4, 4))], lambda x: F.adaptive_avg_pool(x)),
    "adaptive_avg_pool1d": (lambda r: [_w(r, (2, 3, 5))], lambda x: F.adaptive_avg_pool1d(x, 7)),
    "linear": (lambda r: [_w(r, (4, 3)), _w(r, (5, 3)), _w(r, (5,))], lambda x, w, b: F.linear(x, w, b)),
    "normalize_batch": (lambda r: [_w(r, (4, 3, 3, 3))], lambda x: F.normalize(x, "batch")[0]),
    "normalize_group": (lambda r: [_w(r, (2, 4, 3, 3))], lambda x: F.normalize(x, "group", 2)[0]),
    "batch_stats_norm": (lambda r: [_w(r, (4, 3, 3, 3)), _w(r, (3,)), _w(r, (3,))],
                         lambda x, g, b: F.batch_stats_norm(x, g, b)),
    "l1_loss": (lambda r: [_w(r, (6,)), _w(r, (6,)) + 3.0], lambda a, b: F.l1_loss(a, b)),
    "hinge_sum": (lambda r: [np.array([0.5, -0.3, 0.02, -0.8, 0.35])],
                  lambda v: F.hinge_sum(v, [1, 1, 1, -1, -1], 0.1)),
    "softmax_cross_entropy": (lambda r: [_w(r, (5, 4))], lambda z: F.softmax_cross_entropy(z, [0, 3, 1, 1, 2])),
    "cosine_similarity": (lambda r: [_w(r, (7,)), _w(r, (7,))], lambda a, b: F.cosine_similarity(a, b)),
}


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum() if out.size > 1 else out.reshape(1).sum()


def relative_errors(name: str, seed: int = 0) -> list[float]:
    """Relative error between analytic and central-difference gradients, one value per input."""
    build, fn = CASES[name]
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        arrays = [np.asarray(a, dtype=np.float64) for a in build(rng)]
        probe = fn(*[Tensor(a) for a in arrays])
        weights = rng.standard_normal(probe.shape)
        inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        _scalarize(fn(*inputs), weights).backward()
        errs = []
        for k, a in enumerate(arrays):
            num = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                plus = [x.copy() for x in arrays]
                minus = [x.copy() for x in arrays]
                plus[k][idx] += H
                minus[k][idx] -= H
                fp = _scalarize(fn(*[Tensor(x) for x in plus]), weights).item()
                fm = _scalarize(fn(*[Tensor(x) for x in minus]), weights).item()
                num[idx] = (fp - fm) / (2 * H)
            ana = inputs[k].grad if inputs[k].grad is not None else np.zeros_like(a)
            denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-8)
            errs.append(float(np.linalg.norm(ana - num) / denom))
    return errs
