"""
Shared fixtures for the eraser test suite
"""

import numpy as np
import pytest

import nnet
from dataset import SyntheticSpec
from tests.helpers import make_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def four_cell_dataset():
    """k=2, binary bias, two examples per (target, bias) cell"""
    targets = [0, 0, 0, 0, 1, 1, 1, 1]
    biases = [0, 0, 1, 1, 0, 0, 1, 1]
    return make_dataset(targets, biases)


@pytest.fixture
def small_spec():
    return SyntheticSpec(variant="binary_bias", n=2000, alpha=0.05, feature_dim=8,
                         target_signal=0.5, bias_signal=1.5, noise_std=0.5, seed=3)


@pytest.fixture
def linear_model():
    """No-hidden-layer softmax model; its outputs are a linear-softmax oracle"""
    return nnet.build_mlp([8, 2], seed=11)
