import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chipwm import attacks, crypto
from chipwm.attacks import FinetuneConfig, OracleConfig
from chipwm.data import pattern_blobs
from chipwm.verifier import sda


def test_flip_signature_counts_and_nesting():
    xi = np.ones(24, dtype=np.int8)
    sizes = [8, 16]
    prev = np.zeros(24, dtype=bool)
    for rate in np.round(np.arange(0, 11) / 10, 1):
        flipped = attacks.flip_signature(xi, rate, seed=3, layer_sizes=sizes) != xi
        assert flipped[:8].sum() == round(rate * 8) and flipped[8:].sum() == round(rate * 16)
        assert np.all(flipped[prev])
        prev = flipped
    with pytest.raises(ValueError):
        attacks.flip_signature(xi, 1.5)
    with pytest.raises(ValueError):
        attacks.flip_signature(xi, 0.5, layer_sizes=[8, 8])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.floats(0, 1), st.integers(0, 2**16))
def test_flip_signature_global_count(C, rate, seed):
    xi = np.random.default_rng(seed).choice([-1, 1], C)
    out = attacks.flip_signature(xi, rate, seed)
    assert (out != xi).sum() == int(round(rate * C))


def test_random_passport_attack(small_master, small_data):
    x, y = small_data.x_test, small_data.y_test
    one = attacks.random_passport_attack(small_master.model, x, y, trials=1, seed=0)
    assert len(one.trials) == 1 and one.extra["std"] == 0.0
    a = attacks.random_passport_attack(small_master.model, x, y, trials=5, seed=1)
    b = attacks.random_passport_attack(small_master.model, x, y, trials=5, seed=1)
    assert a.to_dict() == b.to_dict()
    assert a.accuracy < small_master.model.accuracy(x, y, "aware", small_master.passport)


def test_oracle_attack_short_run(small_master, small_keys, small_data):
    m = small_master
    cfg = OracleConfig(iterations=20)
    out = attacks.oracle_ambiguity_attack(m.model, m.passport, m.certificate, m.signature, small_data,
                                          small_keys.public, cfg=cfg)
    again = attacks.oracle_ambiguity_attack(m.model, m.passport, m.certificate, m.signature, small_data,
                                            small_keys.public, cfg=cfg)
    assert out.accuracy == again.accuracy and out.sda == again.sda
    assert out.extra["forged_passport"].equals(again.extra["forged_passport"])
    assert 0 <= out.pha <= 1 and out.params["white_hat"] is False
    # the victim model is untouched
    assert sda(m.model, m.passport, m.signature) == 1.0


def test_white_hat_collision_gives_full_pha(small_master, small_keys, small_data):
    m = small_master
    out = attacks.oracle_ambiguity_attack(m.model, m.passport, m.certificate, m.signature, small_data,
                                          small_keys.public, cfg=OracleConfig(iterations=150), keys=small_keys)
    assert out.sda >= 0.95 and out.pha == out.sda


def test_flip_sweep_selection(small_master, small_keys, small_data):
    m = small_master
    sweep = attacks.flip_sweep(m.model, m.passport, m.certificate, m.signature, small_data, small_keys.public,
                               rates=[0.0, 0.5], cfg=OracleConfig(iterations=10), restarts=2)
    assert [o.params["flip_rate"] for o in sweep] == [0.0, 0.5]
    for o in sweep:
        assert len(o.trials) == 2 and o.name == "oracle_flip"
        assert o.extra["attacker_loss"] == min(t["attacker_loss"] for t in o.trials)


def test_crypto_only_pha_near_half(small_keys):
    out = attacks.crypto_only_pha(small_keys.public, crypto.encode_text("Owner", small_keys.params.q),
                                  C=512, trials=20)
    assert 0.45 <= out.pha <= 0.55 and len(out.trials) == 20


def test_zero_epoch_finetune_is_identity(small_master, small_data):
    m = small_master
    out = attacks.finetune_attack(m.model, m.passport, m.signature, small_data, cfg=FinetuneConfig(epochs=0))
    assert out.sda == out.extra["sda_before"] == 1.0
    with pytest.raises(ValueError):
        attacks.finetune_attack(m.model, m.passport, m.signature, small_data, mode="transfer")
    with pytest.raises(ValueError):
        attacks.finetune_attack(m.model, m.passport, m.signature, small_data, mode="other")


def test_short_finetune_and_transfer(small_master, small_data):
    m = small_master
    cfg = FinetuneConfig(epochs=2)
    rtal = attacks.finetune_attack(m.model, m.passport, m.signature, small_data, cfg=cfg)
    assert rtal.sda >= 0.95
    other = pattern_blobs(seed=21, n_train=300, n_test=100, classes=4)
    tr = attacks.finetune_attack(m.model, m.passport, m.signature, small_data, cfg=cfg, mode="transfer",
                                 new_data=other)
    assert tr.sda >= 0.95 and tr.name == "finetune_transfer"


def test_prune_endpoints(small_master, small_data):
    m = small_master
    x, y = small_data.x_test, small_data.y_test
    same = attacks.prune(m.model, 0.0, "l1")
    assert same.checkpoint_bytes() == m.model.checkpoint_bytes()
    for strategy in ("l1", "random"):
        gone = attacks.prune(m.model, 1.0, strategy)
        assert all(not p.data.any() for _, p in attacks.prunable_weights(gone))
        assert gone.accuracy(x, y, "aware", m.passport) <= 0.2
    half = attacks.prune(m.model, 0.5, "l1")
    zeros = sum((p.data == 0).sum() for _, p in attacks.prunable_weights(half))
    total = sum(p.data.size for _, p in attacks.prunable_weights(half))
    assert zeros == round(0.5 * total)
    with pytest.raises(ValueError):
        attacks.prune(m.model, 0.5, "magnitude")


def test_prune_sweep_and_rate_pick(small_master, small_data):
    m = small_master
    sweep = attacks.prune_attack(m.model, m.passport, m.signature, small_data.x_test, small_data.y_test,
                                 rates=[0.0, 0.3, 0.6, 0.9])
    assert [o.params["prune_rate"] for o in sweep] == [0.0, 0.3, 0.6, 0.9]
    pick = attacks.highest_rate_retaining(sweep)
    assert pick.accuracy >= 0.5 * sweep[0].accuracy
    beyond = [o for o in sweep if o.params["prune_rate"] > pick.params["prune_rate"]]
    assert all(o.accuracy < 0.5 * sweep[0].accuracy for o in beyond)


def test_outputs(tmp_path):
    outs = [attacks.AttackOutcome("prune_l1", {"prune_rate": r}, 0.9 - r, sda=1.0) for r in (0.0, 0.5)]
    attacks.write_sweep_csv(outs, "prune_rate", tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "param,acc,sda,pha" and lines[2] == "0.5,0.400000,1.000000,"
    attacks.write_jsonl(outs + [attacks.AttackOutcome("r", {}, 0.1, trials=[{"trial": 0, "accuracy": 0.1}])],
                        tmp_path / "a.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert len(rows) == 3 and rows[2]["trial"] == 0
    hist = attacks.histogram_text([0.1, 0.1, 0.95], bins=10)
    assert hist.splitlines()[0].startswith("#") and hist.splitlines()[2] == "0.1500 2"
    assert attacks.outcome_record(attacks.AttackOutcome("x", {}, float("nan")))["accuracy"] is None


def test_non_chip_model_rejected(small_data):
    with pytest.raises(TypeError):
        attacks.random_passport_attack(object(), small_data.x_test, small_data.y_test)
