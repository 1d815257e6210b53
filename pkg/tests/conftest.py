import numpy as np
import pytest

from pathogenx.data import SynthConfig, generate_synthetic
from pathogenx.train import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cohort():
    """A 40-patient synthetic cohort with narrow features, cheap to train on."""
    cfg = SynthConfig(n_patients=40, genomic_dim=12, feature_dim=6, patches_min=2, patches_max=5, seed=7)
    return generate_synthetic(cfg)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(dim=8, heads=2, hidden=4, batch_size=16, epochs=2, seed=3)
