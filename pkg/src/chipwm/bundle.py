"""On-disk layout of master bundles and ownership claims."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import crypto
from .forge import load_passport, save_passport
from .model import ArchConfig, ChipModel
from .trainer import MasterBundle
from .verifier import Claim


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def save_signature(sig: crypto.Signature, path) -> None:
    _dump(Path(path), {"C": sig.C, "bits": sig.to_list()})


def load_signature(path) -> crypto.Signature:
    doc = json.loads(Path(path).read_text())
    sig = crypto.Signature(np.asarray(doc["bits"], dtype=np.int8))
    if sig.C != doc.get("C", sig.C):
        raise ValueError(f"{path}: C={doc['C']} but {sig.C} bits stored")
    return sig


def save_master(bundle: MasterBundle, directory, licensor_text: str, train_config: dict | None = None) -> dict:
    """Writes model.chpm, arch.json, passport.bin(+json), certificate.json, signature.json; returns file hashes."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ck = bundle.model.save(d / "model.chpm")
    _dump(d / "arch.json", bundle.model.arch.to_dict())
    save_passport(bundle.passport, d / "passport.bin", "master", "owner", created_at="1970-01-01T00:00:00Z")
    _dump(d / "certificate.json", {"kind": "licensor", "r_hex": bundle.certificate.hex,
                                   "licensor_text": licensor_text})
    save_signature(bundle.signature, d / "signature.json")
    if bundle.history:
        (d / "history.jsonl").write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in bundle.history))
    if train_config is not None:
        _dump(d / "train_config.json", train_config)
    return {"checkpoint_hash": ck, "passport_digest_hex": bundle.passport.digest_hex()}


def load_model(directory_or_file) -> ChipModel:
    """A checkpoint file (with arch.json beside it) or a bundle directory."""
    p = Path(directory_or_file)
    ck = p / "model.chpm" if p.is_dir() else p
    arch = ArchConfig.from_dict(json.loads((ck.parent / "arch.json").read_text()))
    return ChipModel.load(ck, arch)


def load_certificate(directory) -> crypto.Certificate:
    doc = json.loads((Path(directory) / "certificate.json").read_text())
    kind = doc.get("kind") or ("licensee" if "user_id" in doc else "licensor")
    return crypto.Certificate.from_hex(doc["r_hex"], kind)


def load_master(directory) -> MasterBundle:
    d = Path(directory)
    passport = load_passport(d / "passport.bin")
    sig = load_signature(d / "signature.json")
    return MasterBundle(load_model(d), passport, load_certificate(d), sig, None)


def load_claim(directory, signature_path=None) -> Claim:
    """Claim from a bundle directory; the signature defaults to signature.json inside it."""
    d = Path(directory)
    sig = load_signature(signature_path or d / "signature.json")
    return Claim(load_passport(d / "passport.bin"), load_certificate(d), sig, load_model(d))
