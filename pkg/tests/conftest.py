import os, torch
import pytest

from model.presets import init_weights, preset_mnist_mlp
from module.data import synthetic_blobs


@pytest.fixture
def blobs():
    return synthetic_blobs(512, 4, 8, seed=0)


@pytest.fixture
def small_mlp():
    """Sigmoid MLP over 1x1x8 inputs, standard-normal input stats."""
    torch.manual_seed(0)
    net = preset_mnist_mlp(input_shape=(1, 1, 8), classes=4, hidden=6, depth=2)
    return init_weights(net)


@pytest.fixture
def mnist_dir():
    path = os.environ.get('MNIST_DIR')
    if not path or not os.path.isdir(path):
        pytest.skip("MNIST_DIR not set")
    return path