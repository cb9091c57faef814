"""Desk-scale CNN whose selected normalization layers are CHIP layers."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, checkpoint, functional as F, no_grad
from .autodiff.nn import Conv2d, Linear, Module, Norm2d
from .passport import ChipNorm, Passport, extract_signature_bits


@dataclass
class ArchConfig:
    in_channels: int = 1
    image_size: int = 16
    widths: tuple = (8, 16)
    num_classes: int = 10
    passport_layers: tuple = ("norm1", "norm2")
    norm_mode: str = "batch"
    groups: int = 4
    skip: bool = True
    tlp_bias: bool = False
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.passport_layers = tuple(self.passport_layers)
        valid = {f"norm{i + 1}" for i in range(len(self.widths))}
        bad = [p for p in self.passport_layers if p not in valid]
        if bad or not self.passport_layers:
            raise ValueError(f"passport layers must be a non-empty subset of {sorted(valid)}, "
                             f"got {self.passport_layers}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["passport_layers"] = list(self.passport_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


class ChipModel(Module):
    """conv -> norm -> leaky_relu -> (avgpool | global pool) per block, then a linear head.

    All blocks but the last downsample by 2 with average pooling.
    """

    def __init__(self, arch: ArchConfig | None = None):
        super().__init__()
        arch = arch or ArchConfig()
        object.__setattr__(self, "arch", arch)
        rng = np.random.default_rng(arch.seed)
        in_ch, size = arch.in_channels, arch.image_size
        for i, width in enumerate(arch.widths, start=1):
            conv = Conv2d(in_ch, width, 3, 1, 1, rng)
            setattr(self, f"conv{i}", conv)
            name = f"norm{i}"
            if name in arch.passport_layers:
                norm = ChipNorm(conv, width, (in_ch, size, size), arch.norm_mode, arch.groups, rng, arch.skip,
                               arch.tlp_bias)
            else:
                norm = Norm2d(width, arch.norm_mode, arch.groups)
            setattr(self, name, norm)
            in_ch = width
            if i < len(arch.widths):
                size //= 2
        self.fc = Linear(in_ch, arch.num_classes, rng)

    # ------------------------------------------------------------------
    @property
    def chip_layers(self) -> "list[tuple[str, ChipNorm]]":
        return [(n, getattr(self, n)) for n in self.arch.passport_layers]

    @property
    def signature_length(self) -> int:
        return sum(layer.channels for _, layer in self.chip_layers)

    def passport_shapes(self) -> dict:
        return {n: layer.passport_shape for n, layer in self.chip_layers}

    @property
    def has_free_branch(self) -> bool:
        return all(layer.has_free_branch for _, layer in self.chip_layers)

    def strip_free_branch(self) -> None:
        for _, layer in self.chip_layers:
            layer.strip_free_branch()

    def clone(self) -> "ChipModel":
        return copy.deepcopy(self)

    # ------------------------------------------------------------------
    def _run(self, x, streams: dict):
        """Runs several branches at once; identical activations are computed once.

        ``streams`` maps branch -> passport (or None). Where every branch still
        shares one activation, a CHIP layer normalizes it a single time and
        both affine pairs read the same statistics.
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        acts = {b: x for b in streams}
        n_blocks = len(self.arch.widths)
        for i in range(1, n_blocks + 1):
            conv, norm, name = getattr(self, f"conv{i}"), getattr(self, f"norm{i}"), f"norm{i}"
            order, xhat = [], {}
            for b in streams:
                k = id(acts[b])
                if k not in xhat:
                    # running statistics follow the first distinct stream only
                    xhat[k] = norm.stats(conv(acts[b]), update=not order)
                    order.append(k)
            shared, new = {}, {}
            for b, passport in streams.items():
                k = id(acts[b])
                if isinstance(norm, ChipNorm):
                    layer_pass = passport[name] if (b == "aware" and passport is not None) else None
                    new[b] = F.affine(xhat[k], *norm.affine_for(b, layer_pass))
                else:
                    if k not in shared:
                        shared[k] = F.affine(xhat[k], norm.gamma, norm.beta)
                    new[b] = shared[k]
            post = {}
            for b in streams:
                k = id(new[b])
                if k not in post:
                    h = F.leaky_relu(new[b])
                    post[k] = F.avg_pool2d(h, 2) if i < n_blocks else F.adaptive_avg_pool(h)
                acts[b] = post[k]
        return {b: self.fc(acts[b]) for b in streams}

    def forward(self, x, branch: str = "free", passport: Passport | None = None) -> Tensor:
        if branch == "aware" and passport is None:
            raise ValueError("the passport-aware branch needs a passport")
        return self._run(x, {branch: passport})[branch]

    __call__ = forward

    def forward_both(self, x, passport: Passport):
        out = self._run(x, {"free": None, "aware": passport})
        return out["free"], out["aware"]

    # ------------------------------------------------------------------
    def predict(self, x, branch: str = "free", passport=None, batch_size: int = 256) -> np.ndarray:
        """Class probabilities, computed in inference mode."""
        was = self.training
        self.eval()
        try:
            with no_grad():
                probs = [F.softmax(self.forward(x[i:i + batch_size], branch, passport))
                         for i in range(0, len(x), batch_size)]
        finally:
            self.train(was)
        return np.concatenate(probs, axis=0)

    def accuracy(self, x, y, branch: str = "free", passport=None) -> float:
        pred = self.predict(x, branch, passport).argmax(axis=1)
        return float(np.mean(pred == np.asarray(y)))

    def extract_signature(self, passport: Passport) -> np.ndarray:
        with no_grad():
            return np.concatenate([extract_signature_bits(layer, passport[n].gamma) for n, layer in self.chip_layers])

    # ------------------------------------------------------------------
    def checkpoint_bytes(self) -> bytes:
        return checkpoint.dumps(self.state_dict())

    def save(self, path) -> str:
        return checkpoint.save(self.state_dict(), path)

    @classmethod
    def load(cls, path, arch: ArchConfig) -> "ChipModel":
        state = checkpoint.load(path)
        return cls.from_state(state, arch)

    @classmethod
    def from_state(cls, state, arch: ArchConfig) -> "ChipModel":
        model = cls(arch)
        aware_only = not any(k.endswith(".gamma0") for k in state)
        if aware_only:
            model.strip_free_branch()
        model.load_state_dict(state, strict=True)
        return model


def arch_to_json(arch: ArchConfig) -> str:
    return json.dumps(arch.to_dict(), sort_keys=True)
