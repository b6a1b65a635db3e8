"""
Tests for contrast indexing, distilled bias-rule targets and patch training
"""

import numpy as np
import pytest

import nnet
from dataset import SyntheticSpec, generate
from distill import (DistilledTargets, PatchArch, build_contrast_index, build_contrast_indices, distill_targets,
                     resolve_anchor, train_patch)
from errors import ConfigError, ContrastCellError, InvalidInputError, SchemaError, ShapeError
from oracle_client import LocalOracle
from prob_core import erase_multi_rows, softmax_rows
from tests.helpers import ConstantOracle, TableOracle, make_dataset


@pytest.fixture
def table_oracle():
    # rows 0..3 of make_dataset([0, 1, 0, 1], [0, 0, 1, 1]) are keyed by their index
    return TableOracle({0: [0.9, 0.1], 1: [0.2, 0.8], 2: [0.6, 0.4], 3: [0.3, 0.7]})


@pytest.fixture
def one_per_cell():
    return make_dataset([0, 1, 0, 1], [0, 0, 1, 1])


def mean_contributing_features(calibration, attr):
    """x plus the mean feature vector of every other-class cell at x's bias value, over k"""
    k = calibration.schema.num_classes
    b = calibration.bias_labels(attr)
    out = np.empty_like(calibration.features)
    for n, (x, y) in enumerate(zip(calibration.features, calibration.targets)):
        total = x.copy()
        for i in range(k):
            if i != y:
                total += calibration.features[(calibration.targets == i) & (b == b[n])].mean(axis=0)
        out[n] = total / k
    return out


# ==================== CONTRAST INDEX ====================

def test_index_caches_cell_mean_logs(four_cell_dataset):
    table = {i: [0.1 + 0.1 * i, 0.9 - 0.1 * i] for i in range(8)}
    index = build_contrast_index(four_cell_dataset, TableOracle(table), "bias")
    assert sorted(index.cells) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    # cell (1, 0) holds rows 4 and 5
    expected = (np.log(table[4]) + np.log(table[5])) / 2
    assert np.allclose(index.cell_mean(1, 0), expected, atol=1e-15)


def test_missing_cell_is_named():
    data = make_dataset([0, 0, 1], [0, 1, 1])
    with pytest.raises(ContrastCellError) as exc:
        build_contrast_index(data, ConstantOracle([0.5, 0.5]), "bias")
    assert "(target=1, bias=0)" in exc.value.message
    assert exc.value.details["missing"] == {"bias": ["(target=1, bias=0)"]}


def test_every_missing_cell_is_listed_before_querying():
    data = make_dataset([0, 0], [0, 1])
    oracle = TableOracle({0: [0.5, 0.5], 1: [0.5, 0.5]})
    with pytest.raises(ContrastCellError) as exc:
        build_contrast_index(data, oracle, "bias")
    assert exc.value.details["missing"]["bias"] == ["(target=1, bias=0)", "(target=1, bias=1)"]
    assert oracle.calls == 0


def test_indices_per_attribute_share_one_oracle_pass():
    targets = [0, 0, 0, 0, 1, 1, 1, 1]
    biases = [[0, 0], [0, 1], [1, 0], [1, 1], [0, 0], [0, 1], [1, 0], [1, 1]]
    data = make_dataset(targets, biases)
    oracle = TableOracle({i: [0.05 + 0.1 * i, 0.95 - 0.1 * i] for i in range(8)})
    indices = build_contrast_indices(data, oracle, ["bias0", "bias1"])
    assert oracle.calls == 1
    assert indices["bias0"].cells[(1, 0)] == [4, 5]
    assert indices["bias1"].cells[(1, 0)] == [4, 6]


def test_unknown_attribute_and_class_mismatch(four_cell_dataset):
    with pytest.raises(SchemaError):
        build_contrast_index(four_cell_dataset, ConstantOracle([0.5, 0.5]), "race")
    with pytest.raises(ShapeError):
        build_contrast_index(four_cell_dataset, ConstantOracle([0.2, 0.3, 0.5]), "bias")


# ==================== DISTILLED TARGETS ====================

def test_single_contrast_example(one_per_cell, table_oracle):
    index = build_contrast_index(one_per_cell, table_oracle, "bias")
    targets = distill_targets(one_per_cell, index, table_oracle)
    assert np.allclose(targets[0].probs, [0.6, 0.4], atol=1e-12)


def test_constant_oracle_gives_its_output_back(four_cell_dataset):
    oracle = ConstantOracle([0.35, 0.65])
    targets = distill_targets(four_cell_dataset, build_contrast_index(four_cell_dataset, oracle, "bias"), oracle)
    assert np.allclose(targets.as_array(), [0.35, 0.65], atol=1e-12)


@pytest.mark.parametrize("variant,k", [("binary_bias", 2), ("multiclass", 4)])
def test_linear_oracle_distills_to_the_mean_input(variant, k):
    calibration = generate(SyntheticSpec(variant=variant, num_classes=k, n=1200, alpha=0.2, feature_dim=12, seed=8))
    attr = calibration.schema.bias_names[0]
    model = nnet.build_mlp([12, k], seed=8)
    oracle = LocalOracle(model)
    targets = distill_targets(calibration, build_contrast_index(calibration, oracle, attr), oracle)
    expected = nnet.predict_proba(model, mean_contributing_features(calibration, attr))
    assert np.max(np.abs(targets.as_array() - expected)) < 1e-9


def test_own_cell_members_do_not_affect_a_target():
    base = {0: [0.9, 0.1], 1: [0.2, 0.8], 2: [0.6, 0.4], 3: [0.3, 0.7]}
    data = make_dataset([0, 1, 0, 1, 0], [0, 0, 1, 1, 0])
    first = TableOracle({**base, 4: [0.5, 0.5]})
    second = TableOracle({**base, 4: [0.01, 0.99]})
    a = distill_targets(data, build_contrast_index(data, first, "bias"))
    b = distill_targets(data, build_contrast_index(data, second, "bias"))
    # row 4 shares cell (0, 0) with row 0; a row never contrasts against its own cell
    assert np.array_equal(a[0].probs, b[0].probs)
    assert not np.allclose(a[1].probs, b[1].probs)


def test_scaling_changes_sharpness_not_argmax():
    calibration = generate(SyntheticSpec(variant="multiclass", num_classes=3, n=900, alpha=0.1, feature_dim=10, seed=4))
    oracle = LocalOracle(nnet.build_mlp([10, 6, 3], seed=4))
    index = build_contrast_index(calibration, oracle, "color")
    default = distill_targets(calibration, index, oracle).as_array()
    for scale in (1.0, 3.0):
        scaled = distill_targets(calibration, index, oracle, scale=scale).as_array()
        assert np.array_equal(scaled.argmax(axis=1), default.argmax(axis=1))
    sharper = distill_targets(calibration, index, oracle, scale=1.0).as_array()
    assert sharper.max(axis=1).mean() > default.max(axis=1).mean()


def test_single_mode_matches_multi_with_one_example_per_cell(one_per_cell, table_oracle):
    index = build_contrast_index(one_per_cell, table_oracle, "bias")
    multi = distill_targets(one_per_cell, index, mode="multi").as_array()
    single = distill_targets(one_per_cell, index, mode="single", seed=3).as_array()
    assert np.allclose(multi, single, atol=1e-15)


def test_single_mode_is_seeded(small_spec):
    calibration = generate(small_spec)
    oracle = LocalOracle(nnet.build_mlp([8, 2], seed=1))
    index = build_contrast_index(calibration, oracle, "bias")
    a = distill_targets(calibration, index, mode="single", seed=5).as_array()
    b = distill_targets(calibration, index, mode="single", seed=5).as_array()
    c = distill_targets(calibration, index, mode="single", seed=6).as_array()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_targets_cohere_within_bias_groups_as_noise_falls():
    spreads = []
    for noise in (0.2, 0.5, 1.0):
        calibration = generate(SyntheticSpec(n=1000, alpha=0.1, feature_dim=8, noise_std=noise, seed=12))
        oracle = LocalOracle(nnet.build_mlp([8, 2], seed=12))
        targets = distill_targets(calibration, build_contrast_index(calibration, oracle, "bias"), oracle).as_array()
        b = calibration.bias_labels("bias")
        spreads.append(max(np.abs(targets[b == v] - targets[b == v].mean(axis=0)).mean() for v in (0, 1)))
    assert spreads[0] < spreads[1] < spreads[2]


def test_distill_rejects_foreign_index(four_cell_dataset, one_per_cell, table_oracle):
    index = build_contrast_index(one_per_cell, table_oracle, "bias")
    with pytest.raises(InvalidInputError):
        distill_targets(four_cell_dataset, index)
    with pytest.raises(InvalidInputError):
        distill_targets(one_per_cell, index, ConstantOracle([0.5, 0.5]))
    with pytest.raises(ConfigError):
        distill_targets(one_per_cell, index, mode="pairs")
    with pytest.raises(ConfigError):
        distill_targets(one_per_cell, index, scale=0.0)


def test_targets_json_round_trip(tmp_path, one_per_cell, table_oracle):
    targets = distill_targets(one_per_cell, build_contrast_index(one_per_cell, table_oracle, "bias"), seed=2)
    path = str(tmp_path / "targets.json")
    targets.save_json(path)
    loaded = DistilledTargets.load_json(path)
    assert np.array_equal(loaded.as_array(), targets.as_array())
    assert (loaded.bias_attr, loaded.oracle_id, loaded.seed) == ("bias", "table", 2)
    assert len(loaded.targets) == 4


@pytest.fixture
def two_bias_stack():
    """
    Target channel t = +-1 plus two binary biases, each aligned with y three times as
    often as not. The oracle's log-odds are t + 3 (2a - 1) + 3 (2c - 1).
    """
    rows, targets, biases = [], [], []
    for y in (0, 1):
        for a in (0, 1):
            for c in (0, 1):
                copies = (3 if a == y else 1) * (3 if c == y else 1)
                for _ in range(copies):
                    rows.append([2.0 * y - 1.0, float(a), float(c)])
                    targets.append(y)
                    biases.append([a, c])
    data = make_dataset(targets, biases, features=rows)
    model = nnet.build_mlp([3, 2], seed=0)
    model.weights[0] = np.array([[0.0, 0.0, 0.0], [1.0, 6.0, 6.0]])
    model.biases[0] = np.array([0.0, -6.0])
    return data, LocalOracle(model)


def stacked_fair(data, oracle, anchor):
    indices = build_contrast_indices(data, oracle, ["bias0", "bias1"])
    rules = [distill_targets(data, indices[attr], oracle, anchor=anchor).as_array() for attr in ("bias0", "bias1")]
    return erase_multi_rows(oracle.query_array(data.features), rules)


def test_cell_anchor_targets_depend_on_the_bias_value_only(four_cell_dataset):
    oracle = TableOracle({i: [0.1 + 0.1 * i, 0.9 - 0.1 * i] for i in range(8)})
    index = build_contrast_index(four_cell_dataset, oracle, "bias")
    targets = distill_targets(four_cell_dataset, index, oracle, anchor="cell")
    assert targets.anchor == "cell"
    b = four_cell_dataset.bias_labels("bias")
    for v in (0, 1):
        expected = softmax_rows(((index.cell_mean(0, v) + index.cell_mean(1, v)) / 2)[None, :])[0]
        assert np.allclose(targets.as_array()[b == v], expected, atol=1e-12)


def test_stacked_cell_anchored_rules_leave_the_target_signal(two_bias_stack):
    data, oracle = two_bias_stack
    fair = stacked_fair(data, oracle, "cell")
    log_odds = np.log(fair[:, 1] / fair[:, 0])
    assert np.allclose(log_odds, data.features[:, 0], atol=1e-9)
    assert np.array_equal(fair.argmax(axis=1), data.targets)


def test_stacked_example_anchored_rules_overcorrect(two_bias_stack):
    # each rule holds half of log M(x); two of them cancel the target channel and flip aligned rows
    data, oracle = two_bias_stack
    fair = stacked_fair(data, oracle, "example")
    aligned = (data.biases[:, 0] == data.targets) & (data.biases[:, 1] == data.targets)
    assert np.all(fair[aligned].argmax(axis=1) != data.targets[aligned])


@pytest.mark.parametrize("anchor,num_attrs,expected", [
    (None, 1, "example"),
    (None, 2, "cell"),
    ("example", 2, "example"),
    ("cell", 1, "cell"),
])
def test_resolve_anchor(anchor, num_attrs, expected):
    assert resolve_anchor(anchor, num_attrs) == expected


def test_unknown_anchor_is_rejected(one_per_cell, table_oracle):
    with pytest.raises(ConfigError):
        resolve_anchor("mean", 2)
    with pytest.raises(ConfigError):
        distill_targets(one_per_cell, build_contrast_index(one_per_cell, table_oracle, "bias"), anchor="mean")


# ==================== PATCH TRAINING ====================

@pytest.fixture
def bias_grouped():
    calibration = generate(SyntheticSpec(n=600, alpha=0.2, feature_dim=8, target_signal=0.5, bias_signal=2.0,
                                         noise_std=0.3, seed=1))
    group_targets = np.array([[0.8, 0.2], [0.3, 0.7]])
    targets = DistilledTargets(group_targets[calibration.bias_labels("bias")], "bias", "test")
    return calibration, targets, group_targets


def test_patch_converges_to_group_targets(bias_grouped):
    calibration, targets, group_targets = bias_grouped
    config = nnet.TrainConfig(epochs=300, learning_rate=1e-2, seed=0)
    patch = train_patch(calibration, targets, config, PatchArch(hidden=[8]))
    probs = nnet.predict_proba(patch, calibration.features)
    b = calibration.bias_labels("bias")
    for v in (0, 1):
        assert np.max(np.abs(probs[b == v].mean(axis=0) - group_targets[v])) < 0.02
    assert patch.metadata["role"] == "patch"
    assert patch.metadata["bias_attr"] == "bias"
    assert patch.num_classes == 2


def test_zero_epoch_patch_is_the_initialization(bias_grouped):
    calibration, targets, _ = bias_grouped
    patch = train_patch(calibration, targets, nnet.TrainConfig(epochs=0, seed=4), PatchArch(hidden=[4]))
    fresh = nnet.build_mlp([8, 4, 2], seed=4)
    for (_, a), (_, b) in zip(patch.parameter_blocks(), fresh.parameter_blocks()):
        assert np.array_equal(a, b)


def test_patch_training_is_deterministic(bias_grouped):
    calibration, targets, _ = bias_grouped
    config = nnet.TrainConfig(epochs=5, seed=7, loss="hard_label_ce")
    a = train_patch(calibration, targets, config, PatchArch(hidden=[4], activation="tanh"))
    b = train_patch(calibration, targets, config, PatchArch(hidden=[4], activation="tanh"))
    assert nnet.save(a) == nnet.save(b)


def test_patch_targets_must_align(bias_grouped, one_per_cell, table_oracle):
    calibration, _, _ = bias_grouped
    short = distill_targets(one_per_cell, build_contrast_index(one_per_cell, table_oracle, "bias"))
    with pytest.raises(ShapeError):
        train_patch(calibration, short, nnet.TrainConfig(epochs=1), PatchArch(hidden=[4]))
