import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import affine_model
from noisetransfer.data import Dataset, gen_gaussian_blobs, split
from noisetransfer.errors import (
    MalformedFileError,
    ShapeInconsistencyError,
    TrainingDivergedError,
    ValidationError,
    VersionMismatchError,
)
from noisetransfer.model import (
    MlpModel,
    TrainConfig,
    accuracy,
    dumps_model,
    init_model,
    load_ensemble,
    load_model,
    loads_model,
    predict,
    save_ensemble,
    save_model,
    train,
    train_ensemble,
)


def test_init_is_deterministic_in_seed():
    assert init_model([5, 4, 3], "relu", 7) == init_model([5, 4, 3], "relu", 7)
    a, b = init_model([5, 4, 3], "relu", 7), init_model([5, 4, 3], "relu", 8)
    assert not np.array_equal(a.flat_params(), b.flat_params())


def test_init_glorot_bound():
    m = init_model([4, 4], "relu", 0)
    bound = math.sqrt(6 / 8)
    assert bound == pytest.approx(0.8660, abs=1e-4)
    assert np.all(np.abs(m.weights[0]) <= bound)
    assert np.array_equal(m.biases[0], np.zeros(4))
    big = init_model([30, 50, 10], "tanh", 1)
    for w, (fi, fo) in zip(big.weights, [(30, 50), (50, 10)]):
        assert np.abs(w).max() <= math.sqrt(6 / (fi + fo))


@pytest.mark.parametrize("dims", [[3], [3, 0, 2], []])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValidationError):
        init_model(dims, "relu", 0)


def test_model_rejects_nonconforming_layers():
    with pytest.raises(ValidationError):
        MlpModel((2, 3), [np.zeros((2, 3))], [np.zeros(3)])


def test_epochs_zero_returns_identical_copy(blob_data):
    train_set, _ = blob_data
    m = init_model([6, 5, 3], "relu", 3)
    out = train(m, train_set, TrainConfig(0.1, 0, 8, 0))
    assert out == m and out is not m


def test_two_blob_training_reaches_accuracy():
    ds = gen_gaussian_blobs(50, 2, 2, 0.05, seed=1)
    m = train(init_model([2, 16, 2], "relu", 0), ds, TrainConfig(0.1, 20, 16, 0))
    assert accuracy(m, ds) >= 0.95


def test_training_is_bit_deterministic(blob_data):
    train_set, _ = blob_data
    cfg = TrainConfig(0.1, 5, 8, 3)
    a = train(init_model([6, 5, 3], "tanh", 1), train_set, cfg)
    b = train(init_model([6, 5, 3], "tanh", 1), train_set, cfg)
    assert a == b


def test_training_divergence_is_reported(blob_data):
    train_set, _ = blob_data
    with pytest.raises(TrainingDivergedError, match="learning rate"):
        train(init_model([6, 5, 3], "relu", 1), train_set, TrainConfig(1e300, 3, 8, 0))


def test_train_rejects_empty_dataset():
    empty = Dataset(np.zeros((0, 2)), np.zeros(0), 2)
    with pytest.raises(ValidationError):
        train(init_model([2, 2], "relu", 0), empty, TrainConfig())


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"epochs": -1}, {"batch_size": 0}])
def test_train_config_validation(kwargs):
    with pytest.raises(ValidationError):
        TrainConfig(**kwargs)


def test_predict_ties_go_to_lowest_index():
    m = affine_model(np.zeros((4, 3)), np.full(4, 2.0))
    assert predict(m, np.array([0.3, 0.1, 0.9])) == 0
    assert np.array_equal(predict(m, np.random.default_rng(0).uniform(size=(6, 3))), np.zeros(6))


def test_accuracy_empty_dataset_is_error():
    with pytest.raises(ValidationError):
        accuracy(init_model([2, 2], "relu", 0), Dataset(np.zeros((0, 2)), np.zeros(0), 2))


def test_accuracy_matches_enumeration():
    # logits = [x0 - x1, x1 - x0, 0.25]; enumerate the grid by hand
    m = affine_model([[1.0, -1.0], [-1.0, 1.0], [0.0, 0.0]], [0.0, 0.0, 0.25])
    grid = np.array(list(itertools.product([0.0, 0.5, 1.0], repeat=2)))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2])
    expected = []
    for (a, b), lab in zip(grid, labels):
        scores = [a - b, b - a, 0.25]
        best = max(range(3), key=lambda c: (scores[c], -c))
        expected.append(best == lab)
    assert accuracy(m, Dataset(grid, labels, 3)) == pytest.approx(sum(expected) / len(expected))


def test_ensemble_with_forced_equal_seeds_is_flagged(blob_data):
    train_set, _ = blob_data
    ens = train_ensemble([6, 4, 3], 2, 0, train_set, TrainConfig(0.1, 2, 8, 0), seeds=[5, 5])
    assert ens[0] == ens[1]
    assert ens.metadata["degenerate"] is True


def test_ensemble_members_and_diversity(small_ensemble, blob_data):
    _, test_set = blob_data
    assert small_ensemble.metadata["seeds"] == [0, 1, 2, 3]
    assert small_ensemble.metadata["degenerate"] is False
    params = [m.flat_params() for m in small_ensemble]
    for a, b in itertools.combinations(params, 2):
        assert np.linalg.norm(a - b) > 0


def test_k8_blob_ensemble_accuracy():
    train_set, test_set = split(gen_gaussian_blobs(80, 8, 3, 0.1, seed=2), 0.5, seed=2)
    ens = train_ensemble([8, 16, 3], 8, 10, train_set, TrainConfig(0.1, 20, 16, 0))
    assert all(accuracy(m, test_set) >= 0.9 for m in ens)


def test_train_ensemble_deterministic(blob_data):
    train_set, _ = blob_data
    cfg = TrainConfig(0.1, 3, 8, 0)
    a = train_ensemble([6, 4, 3], 3, 9, train_set, cfg)
    b = train_ensemble([6, 4, 3], 3, 9, train_set, cfg)
    assert all(x == y for x, y in zip(a, b))


def test_train_ensemble_requires_two_members(blob_data):
    with pytest.raises(ValidationError):
        train_ensemble([6, 4, 3], 1, 0, blob_data[0], TrainConfig())


def test_save_load_roundtrip(tmp_path):
    m = init_model([5, 7, 3], "tanh", 123)
    m.biases[0][:] = [0.1, 1 / 3, -2.5e-310, 1e300, -0.0, 7.0, 2.0**-1074]
    save_model(m, tmp_path / "m.json")
    assert load_model(tmp_path / "m.json") == m


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_roundtrip_property(w):
    m = MlpModel((2, 3), [w], [np.zeros(3)], "relu", 2**63 - 1)
    assert loads_model(dumps_model(m)) == m


def test_truncated_file_is_malformed(tmp_path):
    text = dumps_model(init_model([4, 3, 2], "relu", 0))
    (tmp_path / "m.json").write_text(text[: len(text) // 2])
    with pytest.raises(MalformedFileError):
        load_model(tmp_path / "m.json")


def test_weight_count_mismatch_is_shape_error():
    text = dumps_model(affine_model([[1.0, 2.0], [3.0, 4.0]], [0.0, 0.0]))
    bad = text.replace("[1.0, 2.0, 3.0, 4.0]", "[1.0, 2.0, 3.0]")
    assert bad != text
    with pytest.raises(ShapeInconsistencyError):
        loads_model(bad)


def test_version_mismatch():
    text = dumps_model(init_model([2, 2], "relu", 0)).replace('"format_version": 1', '"format_version": 2')
    with pytest.raises(VersionMismatchError):
        loads_model(text)


def test_model_file_is_self_describing():
    text = dumps_model(affine_model([[0.1, 0.2]], [0.3]))
    assert "0.10000000000000001" in text  # 17 significant digits
    for key in ("format_version", "layer_dims", "activation", "seed", "weights", "biases"):
        assert f'"{key}"' in text


def test_ensemble_roundtrip(tmp_path, small_ensemble):
    save_ensemble(small_ensemble, tmp_path / "ens")
    loaded = load_ensemble(tmp_path / "ens")
    assert len(loaded) == len(small_ensemble)
    assert all(a == b for a, b in zip(loaded, small_ensemble))
    assert loaded.metadata == small_ensemble.metadata


def test_missing_ensemble(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_ensemble(tmp_path / "nope")
