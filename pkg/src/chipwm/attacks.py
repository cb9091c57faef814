"""Red-team harness: ambiguity attacks (random / oracle passports) and removal attacks.

Every attack works on a deep copy of the model it is given. All metrics go
through ``verifier`` so attack numbers and verification numbers agree.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import crypto, verifier
from .autodiff import SGD, Adam, Tensor
from .autodiff import functional as F
from .autodiff.nn import Linear
from .autodiff.tensor import concat
from .data import Dataset, batches
from .model import ChipModel
from .passport import CLAMP, Passport, PassportLayer, sign_loss


@dataclass
class AttackOutcome:
    name: str
    params: dict
    accuracy: float
    sda: float | None = None
    pha: float | None = None
    trials: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_model(model: ChipModel) -> None:
    if not isinstance(model, ChipModel):
        raise TypeError("attacks need a ChipModel")


# --------------------------------------------------------------------------
# ambiguity attacks


def random_passport_attack(model: ChipModel, x, y, trials: int = 100, seed: int = 0,
                           clamp: float = CLAMP) -> AttackOutcome:
    _check_model(model)
    victim = model.clone()
    shapes = victim.passport_shapes()
    rng = np.random.default_rng(seed)
    records = []
    for t in range(trials):
        p = Passport.random(shapes, int(rng.integers(2**63)), clamp)
        records.append({"trial": t, "accuracy": victim.accuracy(x, y, "aware", p)})
    accs = np.array([r["accuracy"] for r in records])
    return AttackOutcome("random_passport", {"trials": trials, "seed": seed}, float(accs.mean()),
                         trials=records, extra={"std": float(accs.std())})


def flip_signature(xi, flip_rate: float, seed: int = 0, layer_sizes=None) -> np.ndarray:
    """Target signature with seeded positions negated.

    With ``layer_sizes`` the rate is applied per passport layer
    (round(flip_rate * C_l) bits each), so every layer sees the same flip
    fraction; otherwise round(flip_rate * C) positions over the whole string.
    Positions flipped at a lower rate stay flipped at every higher rate.
    """
    bits = np.asarray(getattr(xi, "bits", xi), dtype=np.int8).copy()
    if not 0.0 <= flip_rate <= 1.0:
        raise ValueError("flip rate must lie in [0, 1]")
    sizes = [bits.size] if layer_sizes is None else list(layer_sizes)
    if sum(sizes) != bits.size:
        raise ValueError(f"layer sizes {sizes} do not add up to {bits.size} bits")
    rng = np.random.default_rng(seed)
    off = 0
    for n in sizes:
        k = int(round(flip_rate * n))
        idx = off + rng.permutation(n)[:k]
        bits[idx] *= -1
        off += n
    return bits


@dataclass
class OracleConfig:
    iterations: int = 300
    lr: float = 0.01
    batch_size: int = 64
    lambda_acc: float = 1.0
    lambda_dis: float = 1.0
    jitter: float = 2.0
    tau: float = 0.1
    clamp: float = CLAMP
    seed: int = 0


def oracle_ambiguity_attack(model: ChipModel, genuine: Passport, certificate, xi, data: Dataset, pk,
                            data_fraction: float = 0.3, flip_rate: float = 0.0,
                            cfg: OracleConfig | None = None, keys=None, restart: int = 0) -> AttackOutcome:
    """Forge a passport for a fixed model from the genuine one plus a slice of training data.

    ``xi`` is the signature embedded in ``model``. The forged passport is
    pushed to project onto the (possibly flipped) target while staying
    useful on the attacker's data and orthogonal to the genuine passport.
    With ``keys`` (the owner's trapdoor) a collision certificate is also
    minted for the forged passport, the white-hat arm. ``restart`` only
    changes the starting point; target flips and data slice follow ``cfg.seed``.
    """
    _check_model(model)
    cfg = cfg or OracleConfig()
    victim = model.clone()
    victim.eval()
    target = flip_signature(xi, flip_rate, cfg.seed, [layer.channels for _, layer in victim.chip_layers])
    rng = np.random.default_rng([cfg.seed, restart])
    part = data.subset(data_fraction, cfg.seed)
    names = genuine.names()
    maps = {}
    for n in names:
        g = genuine[n].gamma + cfg.jitter * rng.standard_normal(genuine[n].gamma.shape)
        b = genuine[n].beta + cfg.jitter * rng.standard_normal(genuine[n].beta.shape)
        maps[n] = (Tensor(np.clip(g, -cfg.clamp, cfg.clamp).astype(np.float32), requires_grad=True),
                   Tensor(np.clip(b, -cfg.clamp, cfg.clamp).astype(np.float32), requires_grad=True))
    params = [(f"{n}.{i}", t) for n in names for i, t in enumerate(maps[n])]
    opt = Adam(params, lr=cfg.lr)
    layers = [layer for _, layer in victim.chip_layers]
    genuine_flat = Tensor(genuine.flat())

    def objective(xb, yb, pmaps):
        loss = sign_loss(layers, [pmaps[n][0] for n in names], target, cfg.tau)
        if cfg.lambda_acc:
            loss = loss + F.softmax_cross_entropy(victim(xb, "aware", pmaps), yb) * cfg.lambda_acc
        if cfg.lambda_dis:
            mine = concat([t.flatten() for n in names for t in pmaps[n]])
            loss = loss + F.cosine_similarity(mine, genuine_flat).abs() * cfg.lambda_dis
        return loss

    it = 0
    while it < cfg.iterations:
        for xb, yb in batches(part.x_train, part.y_train, cfg.batch_size, rng):
            if it >= cfg.iterations:
                break
            opt.zero_grad()
            loss = objective(xb, yb, maps)
            loss.backward()
            opt.step()
            for a, b in maps.values():
                np.clip(a.data, -cfg.clamp, cfg.clamp, out=a.data)
                np.clip(b.data, -cfg.clamp, cfg.clamp, out=b.data)
            it += 1
    final_loss = objective(part.x_train, part.y_train,
                           {n: (Tensor(g.data), Tensor(b.data)) for n, (g, b) in maps.items()}).item()
    forged = Passport((n, PassportLayer(maps[n][0].data.copy(), maps[n][1].data.copy())) for n in names)
    extracted = victim.extract_signature(forged)
    cert = certificate
    if keys is not None:
        q = keys.params.q
        cert = crypto.trapdoor_collide(keys, genuine.digest(q), certificate, forged.digest(q))
    acc = victim.accuracy(data.x_test, data.y_test, "aware", forged)
    outcome = AttackOutcome(
        "oracle_ambiguity",
        {"flip_rate": flip_rate, "data_fraction": data_fraction, "iterations": cfg.iterations,
         "white_hat": keys is not None, "restart": restart},
        acc,
        sda=verifier.match_fraction(extracted, target),
        pha=verifier.pha(victim, forged, cert, pk, extracted),
        extra={"sda_original": verifier.match_fraction(extracted, xi),
               "attacker_loss": final_loss,
               "genuine_accuracy": victim.accuracy(data.x_test, data.y_test, "aware", genuine),
               "cosine": float(np.dot(forged.flat(), genuine.flat())
                               / (np.linalg.norm(forged.flat()) * np.linalg.norm(genuine.flat())))},
    )
    outcome.extra["forged_passport"] = forged
    return outcome


def flip_sweep(model, genuine, certificate, xi, data, pk, rates=None, cfg: OracleConfig | None = None,
               data_fraction: float = 0.3, restarts: int = 3) -> list[AttackOutcome]:
    """Oracle attack at each flip rate.

    Each rate runs ``restarts`` starting points and keeps the one with the
    lowest final attacker objective on the attacker's own data; the test
    split plays no part in the choice. All restarts are listed in ``trials``.
    """
    cfg = cfg or OracleConfig()
    rates = np.round(np.arange(0, 11) / 10, 1) if rates is None else rates
    out = []
    for r in rates:
        runs = [oracle_ambiguity_attack(model, genuine, certificate, xi, data, pk, data_fraction, float(r), cfg,
                                        restart=k) for k in range(restarts)]
        best = min(runs, key=lambda o: o.extra["attacker_loss"])
        best.name = "oracle_flip"
        best.params["restarts"] = restarts
        best.trials = [{"restart": k, "accuracy": o.accuracy, "sda": o.sda, "pha": o.pha,
                        "attacker_loss": o.extra["attacker_loss"]} for k, o in enumerate(runs)]
        out.append(best)
    return out


def crypto_only_pha(pk, certificate, C: int = 512, trials: int = 20, seed: int = 0,
                    shape=(8, 8, 8)) -> AttackOutcome:
    """PHA of forged passports against a synthetic wp vector, no model involved.

    The "extracted" signature is the sign of a fixed random wp vector (the
    genuine embedding); each trial forges a fresh passport and scores the
    chameleon-hash signature it implies under the genuine certificate.
    """
    rng = np.random.default_rng(seed)
    extracted = np.where(rng.standard_normal(C) >= 0, 1, -1).astype(np.int8)
    records = []
    for t in range(trials):
        forged = Passport.random({"layer": shape}, int(rng.integers(2**63)))
        sig = verifier.recomputed_signature(pk, forged, certificate, C)
        records.append({"trial": t, "pha": verifier.match_fraction(extracted, sig)})
    phas = np.array([r["pha"] for r in records])
    return AttackOutcome("crypto_only_pha", {"C": C, "trials": trials, "seed": seed}, float("nan"),
                         pha=float(phas.mean()), trials=records,
                         extra={"min": float(phas.min()), "max": float(phas.max())})


# --------------------------------------------------------------------------
# removal attacks


@dataclass
class FinetuneConfig:
    epochs: int = 50
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0


def finetune_attack(model: ChipModel, passport: Passport, xi, data: Dataset, data_fraction: float = 0.3,
                    cfg: FinetuneConfig | None = None, mode: str = "rtal",
                    new_data: Dataset | None = None) -> AttackOutcome:
    """Re-train all layers through the passport-aware branch after resetting the head.

    ``mode="transfer"`` trains on ``new_data`` with a head sized for its classes.
    """
    _check_model(model)
    cfg = cfg or FinetuneConfig()
    if mode not in ("rtal", "transfer"):
        raise ValueError(f"unknown fine-tuning mode {mode!r}")
    if mode == "transfer" and new_data is None:
        raise ValueError("transfer mode needs the new dataset")
    train_on = (new_data if mode == "transfer" else data).subset(data_fraction, cfg.seed)
    victim = model.clone()
    before_acc = victim.accuracy(data.x_test, data.y_test, "aware", passport)
    before_sda = verifier.sda(victim, passport, xi)
    rng = np.random.default_rng(cfg.seed)
    if mode == "transfer":
        victim.fc = Linear(victim.fc.W.shape[1], train_on.num_classes, rng)
    else:
        victim.fc.reset(rng)
    opt = SGD(list(victim.named_parameters()), cfg.lr, cfg.momentum, cfg.weight_decay)
    victim.train()
    for _ in range(cfg.epochs):
        for xb, yb in batches(train_on.x_train, train_on.y_train, cfg.batch_size, rng):
            opt.zero_grad()
            F.softmax_cross_entropy(victim(xb, "aware", passport), yb).backward()
            opt.step()
    victim.eval()
    eval_on = new_data if mode == "transfer" else data
    acc = victim.accuracy(eval_on.x_test, eval_on.y_test, "aware", passport)
    return AttackOutcome(f"finetune_{mode}", {"epochs": cfg.epochs, "lr": cfg.lr, "data_fraction": data_fraction},
                         acc, sda=verifier.sda(victim, passport, xi),
                         extra={"accuracy_before": before_acc, "sda_before": before_sda})


def prunable_weights(model: ChipModel) -> list[tuple[str, Tensor]]:
    """Every conv and linear weight matrix (TLP heads included); biases and norm factors are left alone."""
    return [(n, p) for n, p in model.named_parameters() if n.endswith(".W") or n == "W"]


def prune(model: ChipModel, rate: float, strategy: str, seed: int = 0) -> ChipModel:
    if strategy not in ("random", "l1"):
        raise ValueError(f"unknown pruning strategy {strategy!r}")
    out = model.clone()
    params = prunable_weights(out)
    sizes = [p.data.size for _, p in params]
    total = sum(sizes)
    k = int(round(rate * total))
    if k == 0:
        return out
    if strategy == "random":
        drop = np.random.default_rng(seed).permutation(total)[:k]
    else:
        mags = np.concatenate([np.abs(p.data).ravel() for _, p in params])
        drop = np.argsort(mags, kind="stable")[:k]
    mask = np.ones(total, dtype=bool)
    mask[drop] = False
    off = 0
    for (_, p), n in zip(params, sizes):
        p.data *= mask[off:off + n].reshape(p.data.shape)
        off += n
    return out


def prune_attack(model: ChipModel, passport: Passport, xi, x, y, strategy: str = "l1", rates=None,
                 seed: int = 0) -> list[AttackOutcome]:
    _check_model(model)
    rates = np.round(np.arange(0, 11) / 10, 1) if rates is None else rates
    out = []
    for r in rates:
        pruned = prune(model, float(r), strategy, seed)
        out.append(AttackOutcome(f"prune_{strategy}", {"prune_rate": float(r)},
                                 pruned.accuracy(x, y, "aware", passport), sda=verifier.sda(pruned, passport, xi)))
    return out


def highest_rate_retaining(sweep: list[AttackOutcome], fraction: float = 0.5) -> AttackOutcome:
    """Largest-rate outcome whose accuracy is at least ``fraction`` of the rate-0 accuracy."""
    base = sweep[0].accuracy
    keep = [o for o in sweep if o.accuracy >= fraction * base]
    return max(keep, key=lambda o: o.params["prune_rate"])


# --------------------------------------------------------------------------
# outputs


def _jsonable(v):
    if isinstance(v, Passport):
        return None
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def outcome_record(o: AttackOutcome) -> dict:
    d = {"name": o.name, "params": o.params, "accuracy": _jsonable(o.accuracy), "sda": o.sda, "pha": o.pha,
         "extra": {k: _jsonable(v) for k, v in o.extra.items() if not isinstance(v, Passport)}}
    return d


def write_jsonl(outcomes, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for o in outcomes:
            if o.trials:
                for t in o.trials:
                    fh.write(json.dumps({"name": o.name, "params": o.params, **t}, sort_keys=True) + "\n")
            else:
                fh.write(json.dumps(outcome_record(o), sort_keys=True) + "\n")
    return path


def write_sweep_csv(outcomes, param: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "acc", "sda", "pha"])
        for o in outcomes:
            w.writerow([o.params[param], f"{o.accuracy:.6f}",
                        "" if o.sda is None else f"{o.sda:.6f}", "" if o.pha is None else f"{o.pha:.6f}"])
    return path


def histogram_text(values, bins: int = 20, lo: float = 0.0, hi: float = 1.0) -> str:
    """Two-column (bin centre, count) text, plottable with gnuplot ``with boxes``."""
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins, range=(lo, hi))
    centres = (edges[:-1] + edges[1:]) / 2
    lines = ["# bin_centre count"] + [f"{c:.4f} {n}" for c, n in zip(centres, counts)]
    return "\n".join(lines) + "\n"
