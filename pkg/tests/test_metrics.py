"""
Tests for group accuracy, Equalodds, report comparison and table rendering
"""

import json

import numpy as np
import pytest

from dataset import TaskSchema
from errors import EvaluationError, ShapeError
from metrics import MetricsReport, PredictionSet, compare, equalodds_from_table, evaluate, format_rows
from tests.helpers import make_dataset

CELLS = [(0, 0), (0, 1), (1, 0), (1, 1)]
SCHEMA = TaskSchema(2, (("bias", 2),), 2)


def predictions_with_counts(correct_counts, per_cell=20, k=2, cells=CELLS):
    """Prediction set with `per_cell` examples per (target, bias) cell, the first `correct` of them right"""
    predicted, targets, biases = [], [], []
    for (y, b), correct in zip(cells, correct_counts):
        for i in range(per_cell):
            targets.append(y)
            biases.append(b)
            predicted.append(y if i < correct else (y + 1) % k)
    return PredictionSet(predicted, targets, biases, ["bias"])


def make_report(avg_bias, average=80.0, worst=60.0):
    return MetricsReport(
        group_accuracy={cell: average for cell in CELLS},
        attr_group_accuracy={"bias": {cell: average for cell in CELLS}},
        average_group_acc=average,
        worst_group_acc=worst,
        equalodds={"bias": avg_bias},
        avg_bias=avg_bias,
        overall_acc=average,
        n=80,
    )


# ==================== FORMULAS ====================

def test_equalodds_hand_example():
    table = {(0, 0): 0.9, (0, 1): 0.7, (1, 0): 0.6, (1, 1): 0.8}
    assert abs(equalodds_from_table(table, 2, 2) - 20.0) < 1e-12


def test_equalodds_multivalued_bias_uses_pair_mean():
    table = {(0, 0): 0.9, (0, 1): 0.6, (0, 2): 0.3, (1, 0): 0.5, (1, 1): 0.5, (1, 2): 0.5}
    assert abs(equalodds_from_table(table, 2, 3) - 20.0) < 1e-12


def test_equalodds_label_swap_invariance(rng):
    for _ in range(200):
        accs = rng.random(4)
        table = dict(zip(CELLS, accs))
        swapped = {(y, 1 - b): acc for (y, b), acc in table.items()}
        assert equalodds_from_table(table, 2, 2) == equalodds_from_table(swapped, 2, 2)


def test_equalodds_zero_exactly_when_rows_are_flat(rng):
    for _ in range(50):
        row = rng.random(2)
        flat = {(y, b): row[y] for y, b in CELLS}
        assert equalodds_from_table(flat, 2, 2) == 0.0
        bumped = dict(flat)
        bumped[(1, 1)] += 0.01
        assert equalodds_from_table(bumped, 2, 2) > 0.0


# ==================== EVALUATE ====================

@pytest.mark.parametrize("counts,equalodds,average,worst", [
    ((18, 14, 12, 16), 20.0, 75.0, 60.0),
    ((20, 20, 20, 20), 0.0, 100.0, 100.0),
    ((0, 0, 0, 0), 0.0, 0.0, 0.0),
    ((20, 0, 20, 0), 100.0, 50.0, 0.0),
    ((20, 0, 0, 20), 100.0, 50.0, 0.0),
    ((10, 10, 10, 10), 0.0, 50.0, 50.0),
    ((20, 10, 15, 15), 25.0, 75.0, 50.0),
    ((19, 1, 2, 18), 85.0, 50.0, 5.0),
    ((16, 12, 8, 4), 20.0, 50.0, 20.0),
    ((5, 15, 17, 3), 60.0, 50.0, 15.0),
])
def test_fixed_tables(counts, equalodds, average, worst):
    report = evaluate(predictions_with_counts(counts), SCHEMA)
    assert abs(report.equalodds["bias"] - equalodds) < 1e-12
    assert abs(report.average_group_acc - average) < 1e-12
    assert abs(report.worst_group_acc - worst) < 1e-12
    assert report.worst_group_acc <= report.average_group_acc
    assert report.avg_bias == report.equalodds["bias"]


def test_permuting_examples_changes_nothing(rng):
    preds = predictions_with_counts((17, 9, 13, 20))
    order = rng.permutation(len(preds))
    shuffled = PredictionSet(preds.predicted[order], preds.targets[order], preds.biases[order], ["bias"])
    assert evaluate(shuffled, SCHEMA).to_dict() == evaluate(preds, SCHEMA).to_dict()


def test_uniform_random_predictor_scores_one_over_k(rng):
    k, per_cell = 4, 500
    schema = TaskSchema(k, (("bias", 2),), 2)
    targets = np.repeat(np.arange(k), 2 * per_cell)
    biases = np.tile(np.repeat([0, 1], per_cell), k)
    preds = PredictionSet(rng.integers(0, k, targets.shape[0]), targets, biases, ["bias"])
    report = evaluate(preds, schema)
    sigma = 100 * np.sqrt(0.25 * 0.75 / per_cell) / np.sqrt(2 * k)
    assert abs(report.average_group_acc - 25.0) < 4 * sigma


def test_empty_group_is_named():
    preds = PredictionSet([0, 1, 1], [0, 0, 1], [0, 1, 1], ["bias"])
    with pytest.raises(EvaluationError) as exc:
        evaluate(preds, SCHEMA)
    assert "(target=1, bias=0)" in exc.value.message


def test_joint_cells_for_several_attributes():
    schema = TaskSchema(2, (("background", 2), ("co_object", 2)), 2)
    targets, biases, predicted = [], [], []
    for y in (0, 1):
        for bg in (0, 1):
            for co in (0, 1):
                targets += [y, y]
                biases += [[bg, co], [bg, co]]
                # wrong only when background disagrees with the target
                predicted += [y if bg == y else 1 - y] * 2
    preds = PredictionSet(predicted, targets, biases, ["background", "co_object"])
    report = evaluate(preds, schema)
    assert len(report.group_accuracy) == 8
    assert report.equalodds == {"background": 100.0, "co_object": 0.0}
    assert report.avg_bias == 50.0
    assert report.worst_group_acc == 0.0
    assert evaluate(preds, schema, bias_attrs=["co_object"]).bias_attrs == ["co_object"]


def test_from_probs_breaks_ties_toward_lowest_class():
    data = make_dataset([0, 1], [0, 1])
    preds = PredictionSet.from_probs(np.array([[0.5, 0.5], [0.2, 0.8]]), data)
    assert preds.predicted.tolist() == [0, 1]
    with pytest.raises(ShapeError):
        PredictionSet.from_probs(np.array([[0.5, 0.5]]), data)


def test_report_json_is_serializable():
    report = evaluate(predictions_with_counts((18, 14, 12, 16)), SCHEMA, metadata={"seed": 3})
    doc = json.loads(json.dumps(report.to_dict()))
    assert doc["metadata"] == {"seed": 3}
    first = doc["attr_group_accuracy"]["bias"][0]
    assert (first["target"], first["bias"]) == (0, 0)
    assert first["accuracy"] == pytest.approx(90.0, abs=1e-12)


# ==================== COMPARE ====================

def test_relative_bias_reduction():
    delta = compare(make_report(23.26), make_report(3.72))
    assert round(delta.bias_reduction, 3) == 0.840
    assert delta.attr_bias_reduction == {"bias": delta.bias_reduction}
    assert not delta.regression


def test_identical_reports_have_zero_deltas():
    delta = compare(make_report(10.0), make_report(10.0))
    assert all(v == 0 for v in delta.deltas.values())
    assert delta.bias_reduction == 0.0
    assert not delta.regression


def test_bias_increase_is_a_regression():
    delta = compare(make_report(5.0), make_report(7.5))
    assert delta.bias_reduction == -0.5
    assert delta.regression
    assert "REGRESSION" in delta.format_table()


def test_reduction_undefined_from_zero_bias():
    assert compare(make_report(0.0), make_report(2.0)).bias_reduction is None


def test_compare_rejects_mismatched_attributes():
    other = make_report(1.0)
    other.equalodds = {"race": 1.0}
    with pytest.raises(EvaluationError):
        compare(make_report(1.0), other)


# ==================== TABLES ====================

def test_table_columns():
    header = make_report(12.5).format_table().splitlines()[0].split()
    assert header == ["Method", "Average", "ACC", "Worst", "ACC", "Model", "Bias"]


def test_multi_attribute_table_lists_each_bias():
    report = make_report(10.0)
    report.equalodds = {"background": 12.0, "co_object": 8.0}
    text = format_rows([("Vanilla", report)])
    assert "Bias (background)" in text and "Bias (co_object)" in text and "Avg Bias" in text
    assert text.splitlines()[2].split()[0] == "Vanilla"
