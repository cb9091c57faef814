"""Master-model watermarking: joint training of both branches under the signature and balance losses."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import crypto
from .autodiff import SGD, NonFiniteGradient, functional as F
from .data import Dataset, batches
from .model import ArchConfig, ChipModel
from .passport import CLAMP, Passport, balance_loss, sign_loss

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    decay_epochs: tuple = (20, 25)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    norm_mode: str = "batch"
    passport_layers: tuple = ("norm1", "norm2")
    tau: float = 0.1
    # loss weights; the defaults give the plain unweighted sum
    w_free: float = 1.0
    w_aware: float = 1.0
    w_sign: float = 1.0
    w_balance: float = 1.0
    # alternate free/aware updates instead of one combined step per batch
    alternate: bool = False

    def __post_init__(self):
        self.decay_epochs = tuple(self.decay_epochs)
        self.passport_layers = tuple(self.passport_layers)
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay epochs must be strictly increasing")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** sum(epoch >= d for d in self.decay_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        d["passport_layers"] = list(self.passport_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MasterBundle:
    model: ChipModel
    passport: Passport
    certificate: crypto.Certificate
    signature: crypto.Signature
    digest: crypto.MessageDigest
    history: list = field(default_factory=list)


def init_owner_passport(model: ChipModel, seed: int) -> Passport:
    return Passport.random(model.passport_shapes(), seed, CLAMP)


def make_signature(keys, owner_passport: Passport, licensor_text: str, C: int | None = None):
    """Returns (xi, r_o, m_o). ``C`` defaults to the passport's total output channels if known."""
    q = keys.params.q
    m_o = owner_passport.digest(q)
    r_o = crypto.encode_text(licensor_text, q)
    if C is None:
        raise ValueError("signature length C is required")
    xi = crypto.derive_signature(crypto.ch_hash(keys, m_o, r_o), C)
    return xi, r_o, m_o


def loss_terms(model: ChipModel, xb, yb, passport: Passport, xi, cfg: TrainConfig) -> dict:
    """The four parts of the master objective for one batch (unweighted)."""
    free_logits, aware_logits = model.forward_both(xb, passport)
    layers = [layer for _, layer in model.chip_layers]
    names = [n for n, _ in model.chip_layers]
    return {
        "free": F.softmax_cross_entropy(free_logits, yb),
        "aware": F.softmax_cross_entropy(aware_logits, yb),
        "sign": sign_loss(layers, [passport[n].gamma for n in names], xi, cfg.tau),
        "balance": balance_loss(layers, [passport[n] for n in names]),
    }


def _weighted_total(terms: dict, cfg: TrainConfig):
    return (terms["free"] * cfg.w_free + terms["aware"] * cfg.w_aware
            + terms["sign"] * cfg.w_sign + terms["balance"] * cfg.w_balance)


def train_master(data: Dataset, keys, licensor_text: str, cfg: TrainConfig | None = None,
                 arch: ArchConfig | None = None, model: ChipModel | None = None) -> MasterBundle:
    cfg = cfg or TrainConfig()
    if model is None:
        arch = arch or ArchConfig(num_classes=data.num_classes, norm_mode=cfg.norm_mode,
                                  passport_layers=cfg.passport_layers, seed=cfg.seed,
                                  in_channels=data.x_train.shape[1], image_size=data.x_train.shape[-1])
        model = ChipModel(arch)
    if model.arch.num_classes != data.num_classes:
        raise ValueError(f"model head has {model.arch.num_classes} classes, data has {data.num_classes}")
    passport = init_owner_passport(model, cfg.seed + 1)
    xi, r_o, m_o = make_signature(keys, passport, licensor_text, model.signature_length)
    frozen_xi = xi.bits.tobytes()

    opt = SGD(list(model.named_parameters()), cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 2)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        sums = {"free": 0.0, "aware": 0.0, "sign": 0.0, "balance": 0.0, "total": 0.0}
        nb = 0
        for b, (xb, yb) in enumerate(batches(data.x_train, data.y_train, cfg.batch_size, rng)):
            opt.zero_grad()
            terms = loss_terms(model, xb, yb, passport, xi, cfg)
            if cfg.alternate:
                which = "free" if b % 2 == 0 else "aware"
                total = terms[which] * getattr(cfg, f"w_{which}") + terms["sign"] * cfg.w_sign \
                    + terms["balance"] * cfg.w_balance
            else:
                total = _weighted_total(terms, cfg)
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}, batch {b}")
            total.backward()
            try:
                opt.step()
            except NonFiniteGradient as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}") from exc
            for k, v in terms.items():
                sums[k] += v.item()
            sums["total"] += total.item()
            nb += 1
        if xi.bits.tobytes() != frozen_xi:
            raise AssertionError("signature changed during training")
        row = {"epoch": epoch, "lr": opt.lr, **{k: v / nb for k, v in sums.items()}}
        history.append(row)
        log.info("epoch %d lr %.4g loss %.4f (sign %.4f bal %.4f)", epoch, opt.lr, row["total"],
                 row["sign"], row["balance"])
    model.eval()
    return MasterBundle(model, passport, r_o, xi, m_o, history)
