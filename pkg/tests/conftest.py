import numpy as np
import pytest

from noisetransfer.data import gen_gaussian_blobs, split
from noisetransfer.model import MlpModel, TrainConfig, init_model, train_ensemble


def affine_model(weights, bias):
    """Single-layer (linear logits) model with the given parameters."""
    weights = np.asarray(weights, dtype=np.float64)
    return MlpModel(
        (weights.shape[1], weights.shape[0]), [weights], [np.asarray(bias, dtype=np.float64)], "relu", 0
    )


def random_model(dims, activation, seed, scale=1.0):
    m = init_model(dims, activation, seed)
    rng = np.random.default_rng(seed + 10_000)
    for b in m.biases:
        b[:] = scale * rng.normal(size=b.shape)
    return m


@pytest.fixture(scope="session")
def blob_data():
    ds = gen_gaussian_blobs(60, 6, 3, 0.1, seed=4)
    return split(ds, 0.5, seed=4)


@pytest.fixture(scope="session")
def small_ensemble(blob_data):
    train, _ = blob_data
    return train_ensemble([6, 12, 3], 4, 0, train, TrainConfig(0.1, 15, 16, 0), activation="tanh")


# regime used for the MSE-inequality checks: wider members, tighter blobs
THEORY_REGIME = ("ensemble.hidden=[128]", "data.spread=0.1")


@pytest.fixture(scope="session")
def desk_ensemble():
    from noisetransfer import experiments as ex

    exp = ex.load_config(None, THEORY_REGIME)
    train_set, test_set = ex.build_data(exp)
    return ex.build_ensemble(exp, train_set), test_set
