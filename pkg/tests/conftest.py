"""Shared fixtures. The trained checkpoints are session-scoped because the
acceptance criteria reuse them heavily; everything is seeded, so the suite
is bit-reproducible end to end."""

import pytest

import melworld as mw


@pytest.fixture(scope="session")
def acc_world():
    return mw.make_world(seed=7)


@pytest.fixture(scope="session")
def acc_split(acc_world):
    return mw.split_speakers(acc_world, 6, seed=0)


@pytest.fixture(scope="session")
def acc_trace():
    return []


@pytest.fixture(scope="session")
def dat_checkpoint(acc_world, acc_split, acc_trace):
    """Default-config training (adversarial disentanglement on) plus the
    separately trained noisy classifier."""
    ckpt = mw.train_model(acc_world, acc_split, mw.TrainConfig(), trace=acc_trace)
    mw.train_noisy_classifier(acc_world, acc_split, ckpt.model, ckpt.train_config)
    return ckpt


@pytest.fixture(scope="session")
def nodat_checkpoint(acc_world, acc_split):
    """Same budget and seeds with the adversarial weight zeroed."""
    return mw.train_model(acc_world, acc_split, mw.TrainConfig(w_dat=0.0))
