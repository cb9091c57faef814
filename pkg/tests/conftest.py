"""Shared fixtures. ``small_*`` are seconds-scale; the full-size ones feed the acceptance suite."""

import time

import pytest

from chipwm import crypto
from chipwm.data import pattern_blobs
from chipwm.forge import ForgeConfig, forge_fleet, forge_user_triplet
from chipwm.trainer import TrainConfig, train_master

FLEET_SIZE = 5


@pytest.fixture(scope="session")
def small_keys():
    return crypto.keygen(256, b"\x33" * 32)


@pytest.fixture(scope="session")
def small_data():
    return pattern_blobs(seed=7, n_train=800, n_test=300)


@pytest.fixture(scope="session")
def small_master(small_keys, small_data):
    return train_master(small_data, small_keys, "Owner", TrainConfig(epochs=10, lr=0.05, decay_epochs=(8,), seed=1))


@pytest.fixture(scope="session")
def small_user(small_master, small_keys):
    m = small_master
    cfg = ForgeConfig(iterations=300, polish_iterations=100, seed=11)
    return forge_user_triplet(m.model, m.passport, m.certificate, [], small_keys, "alice", m.signature, cfg)


# ---------------------------------------------------------------------------
# full-size artefacts


@pytest.fixture(scope="session")
def keys():
    return crypto.keygen(256, b"A" * 32)


@pytest.fixture(scope="session")
def data():
    return pattern_blobs(seed=0)


@pytest.fixture(scope="session")
def master_run(keys, data):
    """(bundle, wall-clock seconds) for the default training recipe."""
    t0 = time.perf_counter()
    bundle = train_master(data, keys, "Owner", TrainConfig())
    return bundle, time.perf_counter() - t0


@pytest.fixture(scope="session")
def master(master_run):
    return master_run[0]


@pytest.fixture(scope="session")
def fleet(master, keys):
    ids = [f"user{i}" for i in range(FLEET_SIZE)]
    return forge_fleet(master.model, master.passport, master.certificate, keys, master.signature, ids,
                       ForgeConfig())
