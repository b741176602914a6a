import numpy as np
import pytest

from koopvm.data import SyntheticConfig, generate_synthetic
from koopvm.train import TrainConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training benchmarks")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic(SyntheticConfig(n_samples=400, seed=3))


@pytest.fixture
def tiny_config():
    return TrainConfig(latent_dim=6, batch_size=32, recon_epochs=3, predict_epochs=3,
                       finetune_epochs=4, patience=3, ann_hidden=8, ann_epochs=3)
