"""Ownership verification (fidelity, signature, hashing and licensor tests) and traitor tracing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import crypto
from .autodiff.nn import Norm2d
from .model import ChipModel
from .passport import ChipNorm, Passport

TAU_ERROR = 0.05
FIDELITY_MARGIN = 0.02


class IncompatibleModel(ValueError):
    """The plaintiff's passport-aware branch cannot be installed in the suspect model."""


@dataclass
class Claim:
    """What a plaintiff hands the authority.

    ``branch`` is the plaintiff model itself; only its passport-aware parts
    (TLP heads of the CHIP layers) are read.
    """

    passport: Passport
    certificate: crypto.Certificate
    signature: crypto.Signature
    branch: ChipModel


@dataclass
class VerificationReport:
    accuracy: float
    sda: float
    pha: float
    licensor_text: str | None
    verdicts: dict
    thresholds: dict
    reason: str = "ok"

    @property
    def ownership(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "sda": self.sda, "pha": self.pha,
                "licensor_text": self.licensor_text, "verdicts": dict(self.verdicts),
                "thresholds": dict(self.thresholds), "ownership": self.ownership, "reason": self.reason}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "VerificationReport":
        d = json.loads(text)
        d.pop("ownership", None)
        return cls(**d)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False) + "\n"


def match_fraction(a, b) -> float:
    a = np.asarray(getattr(a, "bits", a)).reshape(-1)
    b = np.asarray(getattr(b, "bits", b)).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"signature lengths differ: {a.size} vs {b.size}")
    return float(np.mean(a == b))


# --------------------------------------------------------------------------
# branch transplant


def transplant_branch(suspect: ChipModel, plaintiff: ChipModel) -> ChipModel:
    """Copy of ``suspect`` whose passport layers carry the plaintiff's TLP heads.

    Layers are matched by name. A plain normalization layer in the suspect is
    replaced by a CHIP layer around the suspect's own conv and statistics.
    """
    if not isinstance(suspect, ChipModel):
        raise IncompatibleModel(f"suspect of type {type(suspect).__name__} has no named norm layers")
    out = suspect.clone()
    for name, src in plaintiff.chip_layers:
        if not hasattr(out, name):
            raise IncompatibleModel(f"suspect has no layer {name!r}")
        dst = getattr(out, name)
        conv = getattr(out, "conv" + name[len("norm"):], None)
        channels = getattr(dst, "channels", None) or getattr(getattr(dst, "stats", None), "channels", None)
        if channels != src.channels or conv is None or tuple(conv.W.shape[1:2]) != src.passport_shape[:1]:
            raise IncompatibleModel(f"layer {name!r}: suspect has {channels} channels, claim expects {src.channels}")
        if isinstance(dst, Norm2d):
            chip = ChipNorm(conv, src.channels, src.passport_shape, skip=src.skip,
                            tlp_bias=src.tlp_gamma.fc1.b is not None)
            chip.stats = dst.stats
            chip.gamma0, chip.beta0 = dst.gamma, dst.beta
            setattr(out, name, chip)
            dst = chip
        elif not isinstance(dst, ChipNorm):
            raise IncompatibleModel(f"layer {name!r} is not a normalization layer")
        if dst.passport_shape != src.passport_shape:
            raise IncompatibleModel(f"layer {name!r}: passport shape {dst.passport_shape} vs {src.passport_shape}")
        for head in ("tlp_gamma", "tlp_beta"):
            theirs = dict(getattr(src, head).named_parameters())
            mine = dict(getattr(dst, head).named_parameters())
            if set(theirs) != set(mine):
                raise IncompatibleModel(f"layer {name!r}: TLP parameter sets differ")
            for k, p in theirs.items():
                if mine[k].shape != p.shape:
                    raise IncompatibleModel(f"layer {name!r}: TLP {k} shape {mine[k].shape} vs {p.shape}")
                mine[k].data[...] = p.data
    if set(n for n, _ in out.chip_layers) != set(n for n, _ in plaintiff.chip_layers):
        object.__setattr__(out, "arch", type(out.arch)(**{**out.arch.to_dict(),
                                                          "passport_layers": plaintiff.arch.passport_layers}))
    return out


# --------------------------------------------------------------------------
# the four tests


def fidelity_test(model: ChipModel, passport: Passport, x, y, tau_fidelity: float) -> tuple[float, bool]:
    acc = model.accuracy(x, y, "aware", passport)
    return acc, acc > tau_fidelity


def sda(model: ChipModel, passport: Passport, xi) -> float:
    return match_fraction(model.extract_signature(passport), xi)


def recomputed_signature(pk, passport: Passport, certificate, C: int) -> crypto.Signature:
    m = passport.digest(pk.params.q)
    return crypto.derive_signature(crypto.ch_hash(pk, m, certificate), C)


def pha(model: ChipModel, passport: Passport, certificate, pk, extracted=None) -> float:
    extracted = model.extract_signature(passport) if extracted is None else extracted
    return match_fraction(extracted, recomputed_signature(pk, passport, certificate, len(extracted)))


def licensor_test(certificate) -> tuple[str | None, bool]:
    text = crypto.decode_certificate(certificate)
    return text, text is not None


def verify_ownership(suspect: ChipModel, claim: Claim, pk, x, y, tau_fidelity: float,
                     tau_error: float = TAU_ERROR) -> VerificationReport:
    thresholds = {"tau_fidelity": float(tau_fidelity), "tau_error": float(tau_error)}
    text, v_l = licensor_test(claim.certificate)
    try:
        model = transplant_branch(suspect, claim.branch)
        if model.signature_length != claim.signature.C:
            raise IncompatibleModel(f"claim signature has {claim.signature.C} bits, "
                                    f"suspect passport layers have {model.signature_length} channels")
    except IncompatibleModel as exc:
        verdicts = {"V_F": False, "V_D": False, "V_H": False, "V_L": v_l}
        return VerificationReport(0.0, 0.0, 0.0, text, verdicts, thresholds, f"incompatible: {exc}")
    acc, v_f = fidelity_test(model, claim.passport, x, y, tau_fidelity)
    extracted = model.extract_signature(claim.passport)
    psi = match_fraction(extracted, claim.signature)
    phi = pha(model, claim.passport, claim.certificate, pk, extracted)
    verdicts = {"V_F": bool(v_f), "V_D": psi > 1 - tau_error, "V_H": phi > 1 - tau_error, "V_L": v_l}
    return VerificationReport(acc, psi, phi, text, verdicts, thresholds)


# --------------------------------------------------------------------------
# traitor tracing


@dataclass
class TraceResult:
    user_id: str | None
    passers: list
    accuracies: dict = field(default_factory=dict)

    @property
    def ambiguous(self) -> bool:
        return len(self.passers) > 1

    def to_dict(self) -> dict:
        return {"user_id": self.user_id, "passers": list(self.passers), "ambiguous": self.ambiguous,
                "accuracies": dict(self.accuracies)}


def trace_traitor(suspect, registry_passports, x, y, tau_fidelity: float) -> TraceResult:
    """``registry_passports`` is an ordered iterable of (user_id, passport)."""
    accs, passers = {}, []
    for uid, passport in registry_passports:
        try:
            acc, ok = fidelity_test(suspect, passport, x, y, tau_fidelity)
        except (ValueError, AttributeError, KeyError):
            acc, ok = 0.0, False
        accs[uid] = acc
        if ok:
            passers.append(uid)
    return TraceResult(passers[0] if passers else None, passers, accs)
