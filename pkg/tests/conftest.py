import numpy as np
import pytest

from protodistill.datagen import SyntheticSpec, generate
from protodistill.model import ConvSpec, ModelConfig, PrototypeModel


def tiny_config(num_classes=2, proto_dim=4, input_size=8, prototypes_per_class=2):
    """Two small conv blocks: 8x8 input -> 2x2 feature map."""
    return ModelConfig(
        num_classes=num_classes,
        prototypes_per_class=prototypes_per_class,
        proto_dim=proto_dim,
        input_size=input_size,
        backbone=(ConvSpec(3, 3, 2, 1), ConvSpec(4, 3, 2, 1)),
        addon_hidden=4,
    )


def tiny_model(seed=0, **kwargs):
    return PrototypeModel.initialize(tiny_config(**kwargs), np.random.default_rng(seed))


def tiny_spec(**overrides):
    base = dict(num_classes=2, train_per_class=8, test_per_class=4, image_size=8,
                motifs_per_class=1, motif_size=3, jitter=1, noise_sigma=0.01)
    base.update(overrides)
    return SyntheticSpec(**base)


@pytest.fixture(scope="session")
def tiny_data():
    return generate(tiny_spec(), seed=0)


@pytest.fixture
def tiny_train(tiny_data):
    return tiny_data[0]


@pytest.fixture
def tiny_test(tiny_data):
    return tiny_data[1]
