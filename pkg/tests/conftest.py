import pytest

from iuf.config import RunConfig

TINY = {
    "data.n_objects": 4,
    "data.n_train": 8,
    "data.n_test_normal": 4,
    "data.n_test_defective": 4,
    "data.image_size": 32,
    "model.model_dim": 32,
    "model.latent_channels": 16,
    "model.n_heads": 2,
    "train.epochs": 2,
    "train.batch_size": 4,
}


@pytest.fixture
def tiny_config():
    return RunConfig(dict(TINY))
