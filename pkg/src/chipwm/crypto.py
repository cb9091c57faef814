"""Discrete-log chameleon hash over a Schnorr group.

CH(m, r) = g^m * y^r mod p, with y = g^x. Knowing the trapdoor x, any
message m' can be matched to a fresh randomness r' = r + (m - m') / x mod q
so that CH(m', r') = CH(m, r).

Also holds the glue that turns passports into messages (SHA-512 digest of
the canonical feature-map bytes) and hash values into +/-1 signatures.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sympy import isprime

__all__ = [
    "CryptoError",
    "KeyGenerationError",
    "CapacityError",
    "GroupParams",
    "PublicKey",
    "ChameleonKeySet",
    "Certificate",
    "MessageDigest",
    "Signature",
    "TOY_SEED",
    "keygen",
    "ch_hash",
    "trapdoor_collide",
    "canonical_feature_bytes",
    "digest_bytes",
    "digest_passport",
    "derive_signature",
    "bits_to_signs",
    "encode_text",
    "decode_certificate",
    "text_capacity",
    "save_keys",
    "load_keys",
]

PASSPORT_MAGIC = b"CHIP"
PASSPORT_VERSION = 1
TOY_MAX_BITS = 16
STANDARD_MIN_BITS = 256
STANDARD_P_BITS = 1024
_MAX_TRIES = 200_000
# 32-byte seed that yields the documented toy vector p=23, q=11, g=2, x=3
TOY_SEED = (10).to_bytes(32, "big")


class CryptoError(ValueError):
    pass


class KeyGenerationError(CryptoError):
    pass


class CapacityError(CryptoError):
    pass


@dataclass(frozen=True)
class GroupParams:
    p: int
    q: int
    g: int

    def validate(self) -> None:
        if not (isprime(self.p) and isprime(self.q)):
            raise CryptoError("p and q must be prime")
        if (self.p - 1) % self.q:
            raise CryptoError("q must divide p - 1")
        if self.g in (0, 1) or pow(self.g, self.q, self.p) != 1:
            raise CryptoError("g must generate the order-q subgroup")

    @property
    def profile(self) -> str:
        return "toy" if self.q.bit_length() <= TOY_MAX_BITS else "standard"


@dataclass(frozen=True)
class PublicKey:
    params: GroupParams
    y: int


@dataclass(frozen=True, repr=False)
class ChameleonKeySet:
    params: GroupParams
    y: int
    x: int

    def __post_init__(self):
        if not 1 <= self.x < self.params.q:
            raise CryptoError("trapdoor outside [1, q-1]")
        if pow(self.params.g, self.x, self.params.p) != self.y:
            raise CryptoError("public key does not match trapdoor")

    @property
    def public(self) -> PublicKey:
        return PublicKey(self.params, self.y)

    def __repr__(self) -> str:
        # keep the trapdoor out of logs and tracebacks
        return f"ChameleonKeySet(profile={self.params.profile!r}, q_bits={self.params.q.bit_length()})"


@dataclass(frozen=True)
class Certificate:
    value: int
    kind: str = "licensor"

    def __post_init__(self):
        if self.kind not in ("licensor", "licensee"):
            raise ValueError(f"unknown certificate kind {self.kind!r}")
        if self.value < 0:
            raise CryptoError("certificate value must be non-negative")

    @property
    def hex(self) -> str:
        return format(self.value, "x")

    @classmethod
    def from_hex(cls, text: str, kind: str = "licensee") -> "Certificate":
        try:
            return cls(int(text, 16), kind)
        except (TypeError, ValueError) as exc:
            raise CryptoError(f"malformed certificate hex: {text!r}") from exc


@dataclass(frozen=True)
class MessageDigest:
    value: int
    raw: bytes

    @property
    def hex(self) -> str:
        return self.raw.hex()


@dataclass(frozen=True, eq=False)
class Signature:
    """A C-entry vector over {-1, +1}."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.int8).reshape(-1)
        if bits.size == 0 or not np.all(np.abs(bits) == 1):
            raise ValueError("signature entries must be -1 or +1")
        object.__setattr__(self, "bits", bits)

    @property
    def C(self) -> int:
        return int(self.bits.size)

    def __len__(self) -> int:
        return self.C

    def __eq__(self, other) -> bool:
        return isinstance(other, Signature) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())

    def to_list(self) -> list[int]:
        return [int(b) for b in self.bits]


# --------------------------------------------------------------------------
# key generation


def _drbg(seed: bytes, label: bytes):
    """Counter-mode SHA-512 byte stream; stable across platforms and Python versions."""
    counter = 0
    while True:
        yield hashlib.sha512(seed + b"|" + label + b"|" + counter.to_bytes(8, "big")).digest()
        counter += 1


def _random_bits(stream, nbits: int) -> int:
    nbytes = (nbits + 7) // 8
    buf = b""
    while len(buf) < nbytes:
        buf += next(stream)
    value = int.from_bytes(buf[:nbytes], "big")
    return value >> (8 * nbytes - nbits)


def _trapdoor_from_seed(seed: bytes, q: int) -> int:
    stream = _drbg(seed, b"trapdoor")
    return 1 + _random_bits(stream, q.bit_length() + 64) % (q - 1)


def _toy_group(bits: int) -> GroupParams:
    # smallest q of the requested size whose 2q+1 is prime; g smallest element of order q
    for q in range(max(3, 1 << (bits - 1)), 1 << bits):
        if isprime(q) and isprime(2 * q + 1):
            p = 2 * q + 1
            for g in range(2, p):
                if pow(g, q, p) == 1:
                    return GroupParams(p, q, g)
    raise KeyGenerationError(f"no safe-prime group with a {bits}-bit q")


def _standard_group(bits: int, seed: bytes, p_bits: int) -> GroupParams:
    stream = _drbg(seed, b"group")
    for _ in range(_MAX_TRIES):
        q = _random_bits(stream, bits) | (1 << (bits - 1)) | 1
        if isprime(q):
            break
    else:
        raise KeyGenerationError("could not find a prime q; increase size or supply new entropy")
    k_bits = p_bits - bits
    for _ in range(_MAX_TRIES):
        k = _random_bits(stream, k_bits) | (1 << (k_bits - 1))
        k &= ~1
        p = k * q + 1
        if p.bit_length() == p_bits and isprime(p):
            break
    else:
        raise KeyGenerationError("could not find a prime p = kq + 1")
    for h in range(2, 1 << 16):
        g = pow(h, (p - 1) // q, p)
        if g != 1:
            return GroupParams(p, q, g)
    raise KeyGenerationError("no generator found")


def keygen(security_bits: int, seed: bytes, p_bits: int = STANDARD_P_BITS) -> ChameleonKeySet:
    """Deterministic key generation.

    ``security_bits`` is the bit length of the subgroup order q. Sizes up to 16
    give the exhaustively testable toy profile (smallest safe-prime group of
    that size), sizes of 256 and above the standard profile.
    """
    if len(seed) < 1:
        raise KeyGenerationError("empty seed")
    if 2 <= security_bits <= TOY_MAX_BITS:
        params = _toy_group(security_bits)
    elif security_bits >= STANDARD_MIN_BITS:
        if p_bits <= security_bits + 64:
            raise KeyGenerationError("p must be substantially larger than q")
        params = _standard_group(security_bits, seed, p_bits)
    else:
        raise KeyGenerationError(
            f"security_bits={security_bits}: use <= {TOY_MAX_BITS} (toy) or >= {STANDARD_MIN_BITS} (standard)"
        )
    x = _trapdoor_from_seed(seed, params.q)
    return ChameleonKeySet(params, pow(params.g, x, params.p), x)


# --------------------------------------------------------------------------
# hash and collision


def _check_range(value: int, q: int, what: str) -> None:
    if not 0 <= value < q:
        raise CryptoError(f"{what} outside Z_q")


def _value(obj) -> int:
    return obj.value if hasattr(obj, "value") else int(obj)


def ch_hash(pk, m, r) -> int:
    """CH(m, r) = g^m * y^r mod p. ``pk`` is a PublicKey or ChameleonKeySet."""
    params = pk.params
    mv, rv = _value(m), _value(r)
    _check_range(mv, params.q, "message")
    _check_range(rv, params.q, "certificate")
    return pow(params.g, mv, params.p) * pow(pk.y, rv, params.p) % params.p


def trapdoor_collide(keys: ChameleonKeySet, m, r, m_new) -> Certificate:
    if not isinstance(keys, ChameleonKeySet):
        raise CryptoError("collisions need the secret trapdoor; a public key cannot produce them")
    q = keys.params.q
    mv, rv, nv = _value(m), _value(r), _value(m_new)
    for v, what in ((mv, "message"), (rv, "certificate"), (nv, "new message")):
        _check_range(v, q, what)
    try:
        x_inv = pow(keys.x, -1, q)
    except ValueError as exc:  # only if q is not prime
        raise CryptoError("trapdoor not invertible mod q") from exc
    return Certificate((rv + (mv - nv) * x_inv) % q, "licensee")


# --------------------------------------------------------------------------
# passports -> messages


def _block(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise CryptoError("rank too large")
    head = struct.pack("<B", arr.ndim) + b"".join(struct.pack("<I", d) for d in arr.shape)
    return head + arr.tobytes()


def canonical_feature_bytes(maps: Sequence[np.ndarray], extra: Iterable[np.ndarray] = ()) -> bytes:
    """CHIP container: magic, u16 version, u32 layer count, then rank/dims/f32 blocks.

    Blocks in ``extra`` (the beta maps of a passport file) follow the primary
    blocks and share the same layer count.
    """
    maps = list(maps)
    if not maps:
        raise CryptoError("at least one passport layer is required")
    head = PASSPORT_MAGIC + struct.pack("<HI", PASSPORT_VERSION, len(maps))
    return head + b"".join(_block(m) for m in maps) + b"".join(_block(m) for m in extra)


def digest_bytes(data: bytes, q: int) -> MessageDigest:
    raw = hashlib.sha512(data).digest()
    return MessageDigest(int.from_bytes(raw, "big") % q, raw)


def digest_passport(gamma_maps: Sequence[np.ndarray], q: int) -> MessageDigest:
    return digest_bytes(canonical_feature_bytes(gamma_maps), q)


# --------------------------------------------------------------------------
# hash value -> signature


def bits_to_signs(bits) -> np.ndarray:
    """0 -> -1, 1 -> +1."""
    return np.where(np.asarray(bits, dtype=np.uint8) == 1, 1, -1).astype(np.int8)


def _expand_bits(data: bytes, n: int) -> np.ndarray:
    chunks, counter = [], 0
    while 8 * 64 * len(chunks) < n:
        chunks.append(hashlib.sha512(data + counter.to_bytes(4, "big")).digest())
        counter += 1
    return np.unpackbits(np.frombuffer(b"".join(chunks), dtype=np.uint8))[:n]


def derive_signature(h: int, C: int) -> Signature:
    if C < 1:
        raise ValueError("signature length must be positive")
    h_bytes = h.to_bytes(max(1, (h.bit_length() + 7) // 8), "big")
    return Signature(bits_to_signs(_expand_bits(h_bytes, C)))


# --------------------------------------------------------------------------
# licensor certificates


def text_capacity(q: int) -> int:
    return (q.bit_length() - 1) // 8


def encode_text(text: str, q: int) -> Certificate:
    data = text.encode("ascii", errors="strict") if text.isascii() else None
    if not text or data is None or any(b < 0x20 or b > 0x7E for b in data):
        raise CryptoError("licensor text must be non-empty printable ASCII")
    cap = text_capacity(q)
    if len(data) > cap:
        raise CapacityError(f"text is {len(data)} bytes; max byte length for this q is {cap}")
    return Certificate(int.from_bytes(data, "big"), "licensor")


def decode_certificate(r) -> str | None:
    """Printable-ASCII decoding; None means the certificate carries no licensor text."""
    v = _value(r)
    if v <= 0:
        return None
    data = v.to_bytes((v.bit_length() + 7) // 8, "big")
    if all(0x20 <= b <= 0x7E for b in data):
        return data.decode("ascii")
    return None


# --------------------------------------------------------------------------
# key files


def save_keys(keys, path, include_secret: bool = True) -> Path:
    path = Path(path)
    params = keys.params
    doc = {
        "profile": params.profile,
        "p": format(params.p, "x"),
        "q": format(params.q, "x"),
        "g": format(params.g, "x"),
        "y": format(keys.y, "x"),
    }
    if include_secret and isinstance(keys, ChameleonKeySet):
        doc["x"] = format(keys.x, "x")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    if "x" in doc:
        os.chmod(path, 0o600)
    return path


def load_keys(path) -> ChameleonKeySet | PublicKey:
    doc = json.loads(Path(path).read_text())
    params = GroupParams(int(doc["p"], 16), int(doc["q"], 16), int(doc["g"], 16))
    y = int(doc["y"], 16)
    if "x" in doc:
        return ChameleonKeySet(params, y, int(doc["x"], 16))
    return PublicKey(params, y)
