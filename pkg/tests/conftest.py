import numpy as np
import pytest

from fedncm.data import Dataset
from fedncm.model import Layer, ModelParams, random_backbone, random_head


def make_params(rng, input_dim=4, widths=(5, 3), num_classes=3, activation="tanh"):
    layers = random_backbone(input_dim, widths, activation, rng)
    # non-zero biases so their gradients are exercised
    layers = tuple(Layer(l.W, rng.normal(size=l.out_dim) * 0.3, l.activation) for l in layers)
    d_out = widths[-1] if widths else input_dim
    V, _ = random_head(num_classes, d_out, rng)
    return ModelParams(layers, V, rng.normal(size=num_classes) * 0.3, input_dim)


def make_dataset(rng, n=40, dim=4, C=3):
    y = np.concatenate([np.arange(C), rng.integers(0, C, size=n - C)])
    return Dataset(rng.normal(size=(n, dim)), y, C)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
