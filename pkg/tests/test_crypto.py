import hashlib
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chipwm import crypto
from chipwm.crypto import Certificate, MessageDigest


@pytest.fixture(scope="module")
def toy():
    return crypto.keygen(4, crypto.TOY_SEED)


@pytest.fixture(scope="module")
def std_keys():
    return crypto.keygen(256, b"\x07" * 32)


def test_toy_keygen_vector(toy):
    p = toy.params
    assert (p.p, p.q, p.g, toy.x, toy.y) == (23, 11, 2, 3, 8)
    # independent check by modular exponentiation
    assert pow(2, 11, 23) == 1 and pow(2, 3, 23) == 8


def test_standard_keygen_invariants_and_determinism(std_keys):
    p = std_keys.params
    assert pow(p.g, p.q, p.p) == 1 and p.g != 1
    assert (p.p - 1) % p.q == 0
    assert p.q.bit_length() == 256
    assert pow(p.g, std_keys.x, p.p) == std_keys.y
    again = crypto.keygen(256, b"\x07" * 32)
    assert (again.params, again.y, again.x) == (p, std_keys.y, std_keys.x)


def test_keygen_rejects_in_between_sizes():
    with pytest.raises(crypto.KeyGenerationError):
        crypto.keygen(64, b"x")


def test_ch_hash_examples(toy):
    assert crypto.ch_hash(toy, 5, 7) == pow(2, 5, 23) * pow(8, 7, 23) % 23 == 16
    assert crypto.ch_hash(toy, 0, 0) == 1
    assert crypto.ch_hash(toy, 5, 7) == crypto.ch_hash(toy.public, 5, 7)


@pytest.mark.parametrize("m,r", [(11, 0), (0, 11), (-1, 3)])
def test_ch_hash_domain(toy, m, r):
    with pytest.raises(crypto.CryptoError):
        crypto.ch_hash(toy, m, r)


def test_collision_example(toy):
    assert pow(3, -1, 11) == 4
    r2 = crypto.trapdoor_collide(toy, 5, 7, 9)
    assert r2.value == 2 and r2.kind == "licensee"
    assert crypto.ch_hash(toy, 9, 2) == 16


def test_identity_collision(toy):
    assert crypto.trapdoor_collide(toy, 4, 6, 4).value == 6


def test_collision_exhaustive_toy(toy):
    bad = [(m, r, n) for m, r, n in itertools.product(range(11), repeat=3)
           if crypto.ch_hash(toy, n, crypto.trapdoor_collide(toy, m, r, n)) != crypto.ch_hash(toy, m, r)]
    assert bad == []


def test_collision_randomized_standard(std_keys):
    rng = np.random.default_rng(0)
    q = std_keys.params.q
    for _ in range(1000):
        m, r, n = (int.from_bytes(rng.bytes(40), "big") % q for _ in range(3))
        assert crypto.ch_hash(std_keys, n, crypto.trapdoor_collide(std_keys, m, r, n)) == \
            crypto.ch_hash(std_keys, m, r)


def test_public_key_cannot_collide(toy):
    with pytest.raises(crypto.CryptoError):
        crypto.trapdoor_collide(toy.public, 5, 7, 9)
    exported = [n for n in dir(crypto) if "collide" in n.lower() or "collision" in n.lower()]
    assert exported == ["trapdoor_collide"]


def _layer(seed, shape=(2, 3, 3)):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def test_canonical_bytes_layout():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = crypto.canonical_feature_bytes([a])
    expected = b"CHIP" + (1).to_bytes(2, "little") + (1).to_bytes(4, "little") + bytes([2]) \
        + (2).to_bytes(4, "little") + (3).to_bytes(4, "little") + a.astype("<f4").tobytes()
    assert blob == expected


def test_digest_is_sha512_mod_q(std_keys):
    maps = [_layer(1), _layer(2)]
    q = std_keys.params.q
    d = crypto.digest_passport(maps, q)
    raw = hashlib.sha512(crypto.canonical_feature_bytes(maps)).digest()
    assert d.raw == raw and d.value == int.from_bytes(raw, "big") % q
    assert crypto.digest_passport(maps, q) == d


def test_digest_avalanche_single_bit_flips(std_keys):
    q = std_keys.params.q
    base = _layer(3)
    ref = crypto.digest_passport([base], q).value
    rng = np.random.default_rng(4)
    seen = {ref}
    for pos in rng.choice(base.size * 32, size=100, replace=False):
        x = base.copy()
        raw = x.view(np.uint32).reshape(-1)
        raw[pos // 32] ^= np.uint32(1) << np.uint32(pos % 32)
        seen.add(crypto.digest_passport([x], q).value)
    assert len(seen) == 101


def test_digest_order_sensitive_and_nonempty(std_keys):
    q = std_keys.params.q
    a, b = _layer(5), _layer(6)
    assert crypto.digest_passport([a, b], q) != crypto.digest_passport([b, a], q)
    with pytest.raises(ValueError):
        crypto.digest_passport([], q)


def _reference_signature(h: int, C: int) -> list[int]:
    hb = h.to_bytes(max(1, (h.bit_length() + 7) // 8), "big")
    bits = []
    counter = 0
    while len(bits) < C:
        block = hashlib.sha512(hb + counter.to_bytes(4, "big")).digest()
        for byte in block:
            bits.extend((byte >> (7 - k)) & 1 for k in range(8))
        counter += 1
    return [1 if b else -1 for b in bits[:C]]


@pytest.mark.parametrize("h,C", [(16, 4), (1, 1), (2**1023 + 12345, 1300)])
def test_derive_signature_matches_reference_expansion(h, C):
    assert crypto.derive_signature(h, C).to_list() == _reference_signature(h, C)


def test_sign_mapping():
    assert crypto.bits_to_signs([1, 0, 1, 0]).tolist() == [1, -1, 1, -1]
    with pytest.raises(ValueError):
        crypto.derive_signature(5, 0)


def test_colliding_pairs_share_signature(std_keys):
    q = std_keys.params.q
    m = crypto.digest_passport([_layer(7)], q)
    n = crypto.digest_passport([_layer(8)], q)
    r = crypto.encode_text("Owner", q)
    r2 = crypto.trapdoor_collide(std_keys, m, r, n)
    assert crypto.derive_signature(crypto.ch_hash(std_keys, m, r), 100) == \
        crypto.derive_signature(crypto.ch_hash(std_keys, n, r2), 100)


def test_encode_text_examples(toy, std_keys):
    assert crypto.encode_text("Hi", std_keys.params.q).value == 18537 == 0x4869
    assert crypto.decode_certificate(Certificate(18537)) == "Hi"
    assert crypto.decode_certificate(Certificate(0)) is None
    with pytest.raises(crypto.CapacityError, match="max byte length"):
        crypto.encode_text("Copyright to Alice", toy.params.q)
    with pytest.raises(crypto.CryptoError):
        crypto.encode_text("tab\there", std_keys.params.q)


def test_text_capacity(std_keys):
    q = std_keys.params.q
    cap = crypto.text_capacity(q)
    assert cap == (q.bit_length() - 1) // 8
    crypto.encode_text("~" * cap, q)
    with pytest.raises(crypto.CapacityError):
        crypto.encode_text("~" * (cap + 1), q)


printable = st.text(alphabet=st.characters(min_codepoint=0x20, max_codepoint=0x7E), min_size=1, max_size=31)


@given(printable)
def test_encode_decode_roundtrip(text):
    q = (1 << 255) + 95  # any q above 2^248 holds 31 bytes
    assert crypto.decode_certificate(crypto.encode_text(text, q)) == text


def test_licensee_certificates_rarely_decode(std_keys):
    q = std_keys.params.q
    r = crypto.encode_text("Owner", q)
    m = crypto.digest_passport([_layer(9)], q)
    rng = np.random.default_rng(10)
    decoded = 0
    for _ in range(1000):
        n = int.from_bytes(rng.bytes(40), "big") % q
        decoded += crypto.decode_certificate(crypto.trapdoor_collide(std_keys, m, r, n)) is not None
    assert decoded <= 10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10), st.integers(0, 10), st.integers(0, 10))
def test_collision_property_toy(m, r, n):
    keys = crypto.keygen(4, crypto.TOY_SEED)
    assert crypto.ch_hash(keys, n, crypto.trapdoor_collide(keys, m, r, n)) == crypto.ch_hash(keys, m, r)


def test_key_file_roundtrip(tmp_path, std_keys):
    path = crypto.save_keys(std_keys, tmp_path / "k.json")
    doc = json.loads(path.read_text())
    assert set(doc) == {"profile", "p", "q", "g", "y", "x"}
    assert all(v == v.lower() for k, v in doc.items() if k != "profile")
    assert (path.stat().st_mode & 0o777) == 0o600
    back = crypto.load_keys(path)
    assert (back.params, back.y, back.x) == (std_keys.params, std_keys.y, std_keys.x)
    pub = crypto.load_keys(crypto.save_keys(std_keys, tmp_path / "p.json", include_secret=False))
    assert isinstance(pub, crypto.PublicKey) and pub.y == std_keys.y


def test_certificate_and_digest_types():
    assert Certificate.from_hex("ff").value == 255
    with pytest.raises(crypto.CryptoError):
        Certificate.from_hex("zz")
    with pytest.raises(ValueError):
        Certificate(1, "other")
    d = MessageDigest(3, b"\x00" * 64)
    assert d.hex == "00" * 64
