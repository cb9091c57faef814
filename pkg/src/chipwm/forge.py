"""Minting licensee triplets (user model, user passport, licensee certificate).

Forging is data-free: the only inputs are the master model, the owner
credentials and the passports already handed out. A copied passport and
copies of the TLP heads are optimized so the user passport still projects to
the master signature and reproduces the master affine factors, while drifting
away (in cosine terms) from every earlier passport. The certificate is then a
trapdoor collision onto the owner's chameleon hash value.
"""

from __future__ import annotations

import fcntl
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import crypto
from .autodiff import Adam, Tensor
from .autodiff import functional as F
from .autodiff.tensor import concat
from .model import ArchConfig, ChipModel
from .passport import CLAMP, Passport, PassportLayer, balance_loss, sign_loss

log = logging.getLogger(__name__)


class ForgeError(RuntimeError):
    pass


class RegistryError(ValueError):
    pass


@dataclass
class ForgeConfig:
    iterations: int = 5000
    lr: float = 0.01
    lambda_dis: float = 1.0
    clamp: float = CLAMP
    seed: int = 0
    # initial jitter on the passport copy; the cosine term has no gradient at an exact copy.
    # p_gamma gets its own (small) scale: its channel means set how easily the signature flips
    jitter: float = 2.0
    gamma_jitter: float = 0.1
    tau: float = 0.1
    min_sda: float = 0.99
    retries: int = 3
    # hinge pushing the pooled p_beta features (what the skip path reads) apart;
    # margin is on the mean squared difference, 0 disables
    pooled_margin: float = 2.0
    pooled_maps: str = "beta"
    # TLP-only steps on the balance loss once the passport is final
    polish_iterations: int = 1000

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.clamp <= 0:
            raise ValueError("clamp bound must be positive")


@dataclass
class UserTriplet:
    user_id: str
    model: ChipModel
    passport: Passport
    certificate: crypto.Certificate
    minted_at: str = ""
    diagnostics: dict = field(default_factory=dict)


def _flat(tensors) -> Tensor:
    return concat([t.flatten() for t in tensors])


def passport_cosine(a: Passport, b: Passport) -> float:
    fa, fb = a.flat().astype(np.float64), b.flat().astype(np.float64)
    return float(fa @ fb / (np.linalg.norm(fa) * np.linalg.norm(fb) + 1e-12))


def sda_of(model: ChipModel, passport: Passport, xi) -> float:
    return float(np.mean(model.extract_signature(passport) == np.asarray(getattr(xi, "bits", xi))))


def _optimize(user: ChipModel, start: Passport, others: list[Passport], xi, lam: float, cfg: ForgeConfig):
    names = start.names()
    maps = {n: (Tensor(start[n].gamma, requires_grad=True), Tensor(start[n].beta, requires_grad=True))
            for n in names}
    tlp_params = [(f"{n}.{k}", p) for n, layer in user.chip_layers
                  for k, p in list(layer.tlp_gamma.named_parameters("tlp_gamma"))
                  + list(layer.tlp_beta.named_parameters("tlp_beta"))]
    passport_params = [(f"passport.{n}.{i}", t) for n in names for i, t in enumerate(maps[n])]
    opt = Adam(passport_params + tlp_params, lr=cfg.lr)
    layers = [layer for _, layer in user.chip_layers]
    other_flat = [Tensor(o.flat()) for o in others]
    by_name = dict(user.chip_layers)

    pick = {"beta": (1,), "gamma": (0,), "both": (0, 1)}[cfg.pooled_maps]

    def pooled(pmaps):
        return _flat([by_name[n].skip_term(pmaps[n][i]) for n in names for i in pick])

    other_pooled = []
    if cfg.pooled_margin:
        for o in others:
            other_pooled.append(Tensor(pooled({n: (o[n].gamma, o[n].beta) for n in names}).data))
    last = {}
    for it in range(cfg.iterations):
        opt.zero_grad()
        ls = sign_loss(layers, [maps[n][0] for n in names], xi, cfg.tau)
        lb = balance_loss(layers, [maps[n] for n in names])
        total = ls + lb
        if other_flat and lam:
            mine = _flat([t for n in names for t in maps[n]])
            # |cos| pushes towards orthogonality rather than towards -p
            dis = None
            for o in other_flat:
                c = F.cosine_similarity(mine, o).abs()
                dis = c if dis is None else dis + c
            if other_pooled:
                mine_p = pooled(maps)
                for o in other_pooled:
                    diff = mine_p - o
                    dis = dis + (cfg.pooled_margin - (diff * diff).mean()).relu()
            total = total + dis * lam
        total.backward()
        opt.step()
        for a, b in maps.values():
            np.clip(a.data, -cfg.clamp, cfg.clamp, out=a.data)
            np.clip(b.data, -cfg.clamp, cfg.clamp, out=b.data)
        if it == cfg.iterations - 1:
            last = {"sign": ls.item(), "balance": lb.item(), "total": total.item()}
    polish = Adam(tlp_params, lr=cfg.lr * 0.1)
    fixed = [(maps[n][0].data, maps[n][1].data) for n in names]
    for it in range(cfg.polish_iterations if cfg.iterations else 0):
        polish.zero_grad()
        lb = balance_loss(layers, fixed)
        lb.backward()
        polish.step()
        last["balance"] = lb.item()
    out = Passport((n, PassportLayer(maps[n][0].data.copy(), maps[n][1].data.copy())) for n in names)
    return out, last


def forge_user_triplet(master: ChipModel, owner_passport: Passport, owner_cert: crypto.Certificate,
                       prior_passports, keys: crypto.ChameleonKeySet, user_id: str,
                       xi: crypto.Signature, cfg: ForgeConfig | None = None) -> UserTriplet:
    cfg = cfg or ForgeConfig()
    if not isinstance(keys, crypto.ChameleonKeySet):
        raise ForgeError("minting licensee certificates needs the secret trapdoor")
    q = keys.params.q
    others = [owner_passport] + list(prior_passports)
    m_o = owner_passport.digest(q)
    lam = cfg.lambda_dis
    for attempt in range(cfg.retries + 1):
        rng = np.random.default_rng([cfg.seed, attempt])
        start = owner_passport.copy()
        if cfg.iterations and cfg.jitter:
            for _, pl in start:
                pl.gamma += (cfg.gamma_jitter * rng.standard_normal(pl.gamma.shape)).astype(np.float32)
                pl.beta += (cfg.jitter * rng.standard_normal(pl.beta.shape)).astype(np.float32)
        user = master.clone()
        user.eval()
        passport, last = _optimize(user, start, others, xi, lam, cfg)
        score = sda_of(user, passport, xi)
        if score >= cfg.min_sda:
            break
        log.warning("forge of %s: SDA %.3f below %.2f with lambda %.4g; halving", user_id, score, cfg.min_sda, lam)
        lam /= 2
    else:
        raise ForgeError(f"could not forge {user_id}: SDA {score:.3f} after {cfg.retries + 1} attempts "
                         f"(last losses {last}, lambda {lam * 2:.4g})")
    user.strip_free_branch()
    m_u = passport.digest(q)
    r_u = crypto.trapdoor_collide(keys, m_o, owner_cert, m_u)
    h_o = crypto.ch_hash(keys.public, m_o, owner_cert)
    if crypto.ch_hash(keys.public, m_u, r_u) != h_o:
        raise ForgeError("trapdoor collision did not reproduce the master hash value")
    diag = {"sda": score, "lambda_dis": lam, **last,
            "max_cosine": max(passport_cosine(passport, o) for o in others)}
    minted = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return UserTriplet(user_id, user, passport, r_u, minted, diag)


def forge_fleet(master, owner_passport, owner_cert, keys, xi, user_ids, cfg: ForgeConfig | None = None,
                prior_passports=()) -> list[UserTriplet]:
    cfg = cfg or ForgeConfig()
    prior = list(prior_passports)
    fleet = []
    for i, uid in enumerate(user_ids):
        sub = ForgeConfig(**{**cfg.__dict__, "seed": cfg.seed + 1000 * (i + 1)})
        t = forge_user_triplet(master, owner_passport, owner_cert, prior, keys, uid, xi, sub)
        prior.append(t.passport)
        fleet.append(t)
    return fleet


def active_control_matrix(triplets, x, y) -> np.ndarray:
    """Entry (i, j): accuracy of user model i driven by user passport j."""
    n = len(triplets)
    out = np.zeros((n, n))
    for i, ti in enumerate(triplets):
        for j, tj in enumerate(triplets):
            out[i, j] = ti.model.accuracy(x, y, "aware", tj.passport)
    return out


# --------------------------------------------------------------------------
# bundles and the owner registry


def save_passport(passport: Passport, path, model_id: str, kind: str, user_id: str | None = None,
                  created_at: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(passport.to_bytes())
    side = {"model_id": model_id, "layer_names": passport.names(), "kind": kind,
            "created_at": created_at or datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")}
    if user_id is not None:
        side["user_id"] = user_id
    path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True, indent=2) + "\n")
    return path


def load_passport(path) -> Passport:
    path = Path(path)
    side_path = path.with_suffix(".json")
    names = json.loads(side_path.read_text())["layer_names"] if side_path.exists() else None
    return Passport.from_bytes(path.read_bytes(), names)


def save_bundle(triplet: UserTriplet, directory, model_id: str = "master") -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ck_hash = triplet.model.save(d / "model.chpm")
    save_passport(triplet.passport, d / "passport.bin", model_id, "user", triplet.user_id, triplet.minted_at)
    cert = {"user_id": triplet.user_id, "r_hex": triplet.certificate.hex, "minted_at": triplet.minted_at}
    (d / "certificate.json").write_text(json.dumps(cert, sort_keys=True, indent=2) + "\n")
    (d / "arch.json").write_text(json.dumps(triplet.model.arch.to_dict(), sort_keys=True) + "\n")
    return {"user_id": triplet.user_id, "passport_digest_hex": triplet.passport.digest_hex(),
            "r_hex": triplet.certificate.hex, "checkpoint_hash": ck_hash}


def load_bundle(directory) -> UserTriplet:
    d = Path(directory)
    arch = ArchConfig.from_dict(json.loads((d / "arch.json").read_text()))
    model = ChipModel.load(d / "model.chpm", arch)
    passport = load_passport(d / "passport.bin")
    cert = json.loads((d / "certificate.json").read_text())
    return UserTriplet(cert["user_id"], model, passport,
                       crypto.Certificate.from_hex(cert["r_hex"], "licensee"), cert.get("minted_at", ""))


class Registry:
    """Owner-side JSON-lines file, one record per minted triplet, in mint order."""

    def __init__(self, path):
        self.path = Path(path)

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        with self.path.open() as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def append(self, record: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a+") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                fh.seek(0)
                for line in fh:
                    if not line.strip():
                        continue
                    old = json.loads(line)
                    if old["user_id"] == record["user_id"]:
                        raise RegistryError(f"user {record['user_id']!r} already registered")
                    if old["passport_digest_hex"] == record["passport_digest_hex"]:
                        raise RegistryError("duplicate passport digest")
                fh.seek(0, 2)
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def user_ids(self) -> list[str]:
        return [r["user_id"] for r in self.records()]
