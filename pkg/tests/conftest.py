import math

import pytest

from fedalign.datagen import DatasetConfig, make_federation, rotated_domain_specs
from fedalign.fed import FedConfig
from fedalign.model import ModelConfig


def small_federation(seed=0, n=120, target=1, num_classes=2):
    cfg = DatasetConfig(num_domains=4, num_classes=num_classes, samples_per_domain=n, input_dim=2, seed=seed)
    return make_federation(cfg, rotated_domain_specs(4, math.pi / 4, 0.3), target)


SMALL_MODEL = ModelConfig(input_dim=2, hidden_dims=(8,), latent_dim=3, num_classes=2)


@pytest.fixture
def federation():
    return small_federation()


@pytest.fixture
def fast_config():
    return FedConfig(rounds=6, comm_every=3, local_batch=32, target_batch=64, seed=0)
