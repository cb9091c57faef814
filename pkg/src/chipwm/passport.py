"""Passports and the dual-branch CHIP normalization layer.

A CHIP layer normalizes the host convolution's output once and reads the
result through one of two affine pairs:

* passport-free: learned (gamma0, beta0)
* passport-aware: gamma1 = Ada(p_gamma) + TLP(wp_gamma), beta1 likewise,
  where wp = spatial mean of W (*) p and Ada pools the passport itself.

The skip term Ada(p) ties the aware affine factors directly to the passport.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import crypto
from .autodiff import Tensor, functional as F
from .autodiff.nn import Module, Normalizer, TwoLayerPerceptron

CLAMP = 3.0


class PassportFormatError(ValueError):
    pass


@dataclass
class PassportLayer:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float32)
        self.beta = np.asarray(self.beta, dtype=np.float32)
        if self.gamma.shape != self.beta.shape:
            raise F.DimensionError(f"p_gamma {self.gamma.shape} and p_beta {self.beta.shape} differ")


class Passport:
    """Ordered mapping of passport-layer name to its (p_gamma, p_beta) pair."""

    def __init__(self, layers):
        self.layers: "OrderedDict[str, PassportLayer]" = OrderedDict(layers)
        if not self.layers:
            raise ValueError("a passport needs at least one layer")

    @classmethod
    def random(cls, shapes, seed, clamp: float = CLAMP) -> "Passport":
        """I.i.d. standard normal maps clamped to [-clamp, clamp]; ``shapes`` maps layer -> (C, H, W)."""
        rng = np.random.default_rng(seed)
        layers = OrderedDict()
        for name, shape in shapes.items():
            g = np.clip(rng.standard_normal(shape), -clamp, clamp)
            b = np.clip(rng.standard_normal(shape), -clamp, clamp)
            layers[name] = PassportLayer(g, b)
        return cls(layers)

    def names(self) -> list[str]:
        return list(self.layers)

    def __getitem__(self, name: str) -> PassportLayer:
        return self.layers[name]

    def __iter__(self):
        return iter(self.layers.items())

    def __len__(self) -> int:
        return len(self.layers)

    def copy(self) -> "Passport":
        return Passport((k, PassportLayer(v.gamma.copy(), v.beta.copy())) for k, v in self.layers.items())

    def gamma_maps(self) -> list[np.ndarray]:
        return [v.gamma for v in self.layers.values()]

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([v.gamma.ravel(), v.beta.ravel()]) for v in self.layers.values()])

    def digest(self, q: int) -> crypto.MessageDigest:
        return crypto.digest_passport(self.gamma_maps(), q)

    def digest_hex(self) -> str:
        """SHA-512 of the canonical p_gamma bytes (before reduction into Z_q)."""
        return hashlib.sha512(crypto.canonical_feature_bytes(self.gamma_maps())).hexdigest()

    def to_bytes(self) -> bytes:
        return crypto.canonical_feature_bytes(self.gamma_maps(), [v.beta for v in self.layers.values()])

    @classmethod
    def from_bytes(cls, data: bytes, names=None) -> "Passport":
        gammas, betas = parse_passport_bytes(data)
        names = list(names) if names is not None else [f"layer{i}" for i in range(len(gammas))]
        if len(names) != len(gammas):
            raise PassportFormatError(f"{len(gammas)} layers in container, {len(names)} names given")
        return cls((n, PassportLayer(g, b)) for n, g, b in zip(names, gammas, betas))

    def equals(self, other: "Passport") -> bool:
        return self.names() == other.names() and self.to_bytes() == other.to_bytes()


def parse_passport_bytes(data: bytes) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Inverse of ``Passport.to_bytes``; raises PassportFormatError on any malformed input."""
    view = memoryview(data)
    if len(view) < 10 or bytes(view[:4]) != crypto.PASSPORT_MAGIC:
        raise PassportFormatError("missing CHIP magic")
    version, count = struct.unpack_from("<HI", view, 4)
    if version != crypto.PASSPORT_VERSION:
        raise PassportFormatError(f"unsupported passport version {version}")
    if count == 0 or count > 4096:
        raise PassportFormatError(f"implausible layer count {count}")
    off = 10
    blocks = []
    try:
        for _ in range(2 * count):
            (rank,) = struct.unpack_from("<B", view, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", view, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if n < 0 or off + 4 * n > len(view):
                raise PassportFormatError("truncated passport block")
            arr = np.frombuffer(view[off:off + 4 * n], dtype="<f4").reshape(dims).astype(np.float32)
            off += 4 * n
            blocks.append(arr)
    except struct.error as exc:
        raise PassportFormatError("truncated passport header") from exc
    if off != len(view):
        raise PassportFormatError("trailing bytes in passport container")
    gammas, betas = blocks[:count], blocks[count:]
    for g, b in zip(gammas, betas):
        if g.shape != b.shape:
            raise PassportFormatError("gamma/beta shape mismatch")
        if not np.all(np.isfinite(g)) or not np.all(np.isfinite(b)):
            raise PassportFormatError("non-finite passport values")
    return gammas, betas


def sign_pm1(values: np.ndarray) -> np.ndarray:
    """sign with the tie rule sign(0) = +1."""
    return np.where(np.asarray(values) >= 0, 1, -1).astype(np.int8)


def _as_map(p) -> Tensor:
    return p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float32))


class ChipNorm(Module):
    """Dual-branch passport normalization layer bound to a host convolution."""

    def __init__(self, host, channels: int, passport_shape: tuple, mode: str = "batch", groups: int = 4,
                 rng: np.random.Generator | None = None, skip: bool = True,
                 tlp_bias: bool = True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        # host conv is owned by the model; keep an unregistered reference
        object.__setattr__(self, "host", host)
        self.channels = channels
        self.passport_shape = tuple(passport_shape)
        self.skip = skip
        self.stats = Normalizer(channels, mode, groups)
        self.gamma0 = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta0 = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.tlp_gamma = TwoLayerPerceptron(channels, rng, bias=tlp_bias)
        self.tlp_beta = TwoLayerPerceptron(channels, rng, bias=tlp_bias)

    @property
    def has_free_branch(self) -> bool:
        return "gamma0" in self._params

    def strip_free_branch(self) -> None:
        if self.has_free_branch:
            del self.gamma0
            del self.beta0

    # ------------------------------------------------------------------
    def projected(self, p) -> Tensor:
        """wp = spatial mean of W (*) p; p has the host input's (C_in, H, W) shape."""
        p = _as_map(p)
        if tuple(p.shape) != self.passport_shape:
            raise F.DimensionError(f"passport map {p.shape} does not match layer input {self.passport_shape}")
        out = self.host(p.reshape(1, *p.shape))
        return F.adaptive_avg_pool(out).reshape(self.channels)

    def skip_term(self, p) -> Tensor:
        return F.adaptive_avg_pool1d(_as_map(p), self.channels)

    def aware_affine(self, p_gamma, p_beta) -> tuple[Tensor, Tensor]:
        g = self.tlp_gamma(self.projected(p_gamma))
        b = self.tlp_beta(self.projected(p_beta))
        if self.skip:
            g = self.skip_term(p_gamma) + g
            b = self.skip_term(p_beta) + b
        return g, b

    def free_affine(self) -> tuple[Tensor, Tensor]:
        if not self.has_free_branch:
            raise RuntimeError("this layer was distributed without its passport-free branch")
        return self.gamma0, self.beta0

    def __call__(self, x_w, branch: str = "free", passport_layer=None):
        xhat = self.stats(x_w)
        return F.affine(xhat, *self.affine_for(branch, passport_layer))

    def affine_for(self, branch: str, passport_layer=None) -> tuple[Tensor, Tensor]:
        if branch == "free":
            return self.free_affine()
        if branch == "aware":
            if passport_layer is None:
                raise ValueError("the passport-aware branch needs a passport")
            return self.aware_affine(*_layer_maps(passport_layer))
        raise ValueError(f"unknown branch {branch!r}")


def _layer_maps(passport_layer):
    if isinstance(passport_layer, PassportLayer):
        return passport_layer.gamma, passport_layer.beta
    return passport_layer


def compute_aware_affine(layer: ChipNorm, passport_layer) -> tuple[Tensor, Tensor]:
    return layer.aware_affine(*_layer_maps(passport_layer))


def extract_signature_bits(layer: ChipNorm, p_gamma) -> np.ndarray:
    wp = layer.projected(p_gamma).data
    return sign_pm1(wp)


def sign_loss(layers, passport_maps, xi, tau: float = 0.1) -> Tensor:
    """Hinge on the signs of wp_gamma across all passport layers (pre-TLP).

    ``passport_maps`` is a list of p_gamma maps (arrays or Tensors) aligned with ``layers``.
    """
    xi = np.asarray(getattr(xi, "bits", xi)).reshape(-1)
    total_c = sum(l.channels for l in layers)
    if xi.size != total_c:
        raise ValueError(f"signature has {xi.size} bits, passport layers have {total_c} channels")
    loss, off = None, 0
    for layer, p in zip(layers, passport_maps):
        part = F.hinge_sum(layer.projected(p), xi[off:off + layer.channels], tau)
        loss = part if loss is None else loss + part
        off += layer.channels
    return loss


def balance_loss(layers, passport_pairs) -> Tensor:
    """Sum over layers of l1(gamma0, gamma1) + l1(beta0, beta1) with mean reduction."""
    loss = None
    for layer, pair in zip(layers, passport_pairs):
        g1, b1 = layer.aware_affine(*_layer_maps(pair))
        g0, b0 = layer.free_affine()
        part = F.l1_loss(g0, g1) + F.l1_loss(b0, b1)
        loss = part if loss is None else loss + part
    return loss
