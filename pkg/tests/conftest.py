import numpy as np
import pytest

from cohort.synth import GeneratorSpec, generate
from networks.affinity import AffinityConfig
from networks.backbones import GlobalEncoderConfig, LocalEncoderConfig
from settings import TrainConfig
from training.losses import LossWeights


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mini_global():
    return GlobalEncoderConfig(patch_size=32, depth=3, dim=16, heads=2, mlp_ratio=2, taps=(1, 2, 3))


@pytest.fixture
def mini_local():
    return LocalEncoderConfig(stem_channels=8, out_channels=16, blocks_per_stage=1)


@pytest.fixture
def mini_affinity():
    return AffinityConfig(local_channels=16, global_dim=16, token_dim=16, dim=16, heads=2, scales=(1, 2, 3),
                          mlp_ratio=2, head_hidden=8)


@pytest.fixture
def mini_train_config(mini_global, mini_local, mini_affinity):
    return TrainConfig(batch_size=4, epochs=3, early_stop_patience=2, augment=True, seed=0,
                       bootstrap_resamples=100, loss_weights=LossWeights(),
                       global_encoder=mini_global, local_encoder=mini_local, affinity=mini_affinity)


@pytest.fixture
def tiny_cases():
    return generate(GeneratorSpec(n_patients=20, nodes_per_patient=(1, 4), seed=7))
