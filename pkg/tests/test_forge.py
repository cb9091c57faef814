import numpy as np
import pytest

from chipwm import crypto
from chipwm.forge import (ForgeConfig, ForgeError, Registry, RegistryError, active_control_matrix, forge_fleet,
                          forge_user_triplet, load_bundle, passport_cosine, save_bundle)


QUICK = dict(iterations=150, polish_iterations=50, min_sda=0.0, retries=0)


def test_zero_iterations_is_identity(small_master, small_keys):
    m = small_master
    cfg = ForgeConfig(iterations=0, min_sda=0.0)
    t = forge_user_triplet(m.model, m.passport, m.certificate, [], small_keys, "u0", m.signature, cfg)
    assert t.passport.equals(m.passport)
    assert t.certificate.value == m.certificate.value
    assert t.certificate.kind == "licensee"


def test_forged_user_collides_and_keeps_core(small_master, small_keys):
    m = small_master
    t = forge_user_triplet(m.model, m.passport, m.certificate, [], small_keys, "alice",
                           m.signature, ForgeConfig(**QUICK, seed=7))
    pk = small_keys.public
    q = pk.params.q
    h_o = crypto.ch_hash(pk, m.passport.digest(q), m.certificate)
    assert crypto.ch_hash(pk, t.passport.digest(q), t.certificate) == h_o
    xi_u = crypto.derive_signature(crypto.ch_hash(pk, t.passport.digest(q), t.certificate), m.signature.C)
    assert xi_u == m.signature
    assert not t.passport.equals(m.passport)
    assert crypto.decode_certificate(t.certificate) is None
    assert not t.model.has_free_branch
    before = m.model.state_dict()
    after = t.model.state_dict()
    for name, arr in after.items():
        if ".tlp_" not in name:
            assert np.array_equal(arr, before[name]), name
    assert all("gamma0" not in n and "beta0" not in n for n in after if n.startswith("norm1") or n.startswith("norm2"))
    assert set(t.diagnostics) >= {"sda", "max_cosine", "lambda_dis"}


def test_public_key_cannot_mint(small_master, small_keys):
    m = small_master
    with pytest.raises(ForgeError):
        forge_user_triplet(m.model, m.passport, m.certificate, [], small_keys.public, "u",
                           m.signature, ForgeConfig(iterations=0, min_sda=0.0))


def test_unreachable_sda_raises(small_master, small_keys):
    m = small_master
    flipped = crypto.Signature(-m.signature.bits)
    with pytest.raises(ForgeError, match="could not forge"):
        forge_user_triplet(m.model, m.passport, m.certificate, [], small_keys, "u", flipped,
                           ForgeConfig(iterations=0, min_sda=1.0, retries=1))


def test_fleet_and_control_matrix(small_master, small_keys, small_data):
    m = small_master
    fleet = forge_fleet(m.model, m.passport, m.certificate, small_keys, m.signature,
                        ["a", "b"], ForgeConfig(**QUICK))
    assert [t.user_id for t in fleet] == ["a", "b"]
    assert len({t.passport.digest_hex() for t in fleet} | {m.passport.digest_hex()}) == 3
    assert passport_cosine(fleet[0].passport, fleet[0].passport) == pytest.approx(1.0)
    x, y = small_data.x_test[:100], small_data.y_test[:100]
    one = active_control_matrix(fleet[:1], x, y)
    assert one.shape == (1, 1) and one[0, 0] == fleet[0].model.accuracy(x, y, "aware", fleet[0].passport)
    m = active_control_matrix(fleet, x, y)
    assert m.shape == (2, 2) and np.all((0 <= m) & (m <= 1))


def test_bundle_roundtrip(small_master, small_keys, tmp_path):
    m = small_master
    t = forge_user_triplet(m.model, m.passport, m.certificate, [], small_keys, "bob",
                           m.signature, ForgeConfig(**QUICK, seed=9))
    rec = save_bundle(t, tmp_path / "bob")
    back = load_bundle(tmp_path / "bob")
    assert back.user_id == "bob" and back.passport.equals(t.passport)
    assert back.certificate.value == t.certificate.value
    assert back.model.checkpoint_bytes() == t.model.checkpoint_bytes()
    assert rec["passport_digest_hex"] == t.passport.digest_hex()


def test_registry_rejects_duplicates(tmp_path):
    reg = Registry(tmp_path / "registry.jsonl")
    assert reg.records() == []
    reg.append({"user_id": "a", "passport_digest_hex": "00"})
    reg.append({"user_id": "b", "passport_digest_hex": "01"})
    with pytest.raises(RegistryError, match="already registered"):
        reg.append({"user_id": "a", "passport_digest_hex": "02"})
    with pytest.raises(RegistryError, match="duplicate"):
        reg.append({"user_id": "c", "passport_digest_hex": "01"})
    assert reg.user_ids() == ["a", "b"]


def test_config_validation():
    with pytest.raises(ValueError):
        ForgeConfig(iterations=-1)
    with pytest.raises(ValueError):
        ForgeConfig(clamp=0)
