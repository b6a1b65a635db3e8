"""
Fairness Metrics
Group accuracies over (target, bias value) cells, Equalodds per bias attribute,
before/after comparison and Table-style report rendering. All reported values are
percentages.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations, product
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dataset import Dataset, TaskSchema
from errors import EvaluationError, ShapeError
from prob_core import ProbVector

logger = logging.getLogger(__name__)


@dataclass
class PredictionSet:
    """Predicted classes aligned with the true targets and bias labels of an evaluation set"""

    predicted: np.ndarray
    targets: np.ndarray
    biases: np.ndarray
    bias_names: List[str]

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.int64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        self.biases = np.asarray(self.biases, dtype=np.int64).reshape(self.targets.shape[0], len(self.bias_names))
        if self.predicted.shape != self.targets.shape:
            raise ShapeError(f"{self.predicted.shape[0]} predictions for {self.targets.shape[0]} examples")

    @classmethod
    def from_probs(cls, probs, dataset: Dataset) -> "PredictionSet":
        """Argmax of each row; ties resolve toward the lowest class index."""
        if isinstance(probs, (list, tuple)) and probs and isinstance(probs[0], ProbVector):
            probs = np.vstack([p.probs for p in probs])
        arr = np.asarray(probs, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != len(dataset):
            raise ShapeError(f"Probability matrix {arr.shape} does not align with {len(dataset)} examples")
        return cls(np.argmax(arr, axis=1), dataset.targets, dataset.biases, dataset.schema.bias_names)

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def bias_labels(self, attr: str) -> np.ndarray:
        return self.biases[:, self.bias_names.index(attr)]


@dataclass
class MetricsReport:
    group_accuracy: Dict[Tuple[int, ...], float]
    attr_group_accuracy: Dict[str, Dict[Tuple[int, int], float]]
    average_group_acc: float
    worst_group_acc: float
    equalodds: Dict[str, float]
    avg_bias: float
    overall_acc: float
    n: int
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def bias_attrs(self) -> List[str]:
        return list(self.equalodds)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "average_group_acc": self.average_group_acc,
            "worst_group_acc": self.worst_group_acc,
            "equalodds": dict(self.equalodds),
            "avg_bias": self.avg_bias,
            "overall_acc": self.overall_acc,
            "n": self.n,
            "group_accuracy": [
                {"cell": list(cell), "accuracy": acc} for cell, acc in sorted(self.group_accuracy.items())
            ],
            "attr_group_accuracy": {
                attr: [{"target": y, "bias": b, "accuracy": acc} for (y, b), acc in sorted(table.items())]
                for attr, table in self.attr_group_accuracy.items()
            },
            "metadata": self.metadata,
        }

    def format_table(self, label: str = "Model") -> str:
        return format_rows([(label, self)])


@dataclass
class DeltaReport:
    before: MetricsReport
    after: MetricsReport
    deltas: Dict[str, float]
    relative: Dict[str, Optional[float]]
    bias_reduction: Optional[float]
    attr_bias_reduction: Dict[str, Optional[float]]
    regression: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
            "deltas": self.deltas,
            "relative": self.relative,
            "bias_reduction": self.bias_reduction,
            "attr_bias_reduction": self.attr_bias_reduction,
            "regression": self.regression,
        }

    def format_table(self) -> str:
        table = format_rows([("Before", self.before), ("After", self.after)])
        reduction = "n/a" if self.bias_reduction is None else f"{self.bias_reduction * 100:.1f}%"
        flag = "  (REGRESSION)" if self.regression else ""
        return f"{table}\nRelative bias reduction: {reduction}{flag}"


# --- Formulas ---
def equalodds_from_table(group_accs: Dict[Tuple[int, int], float], num_classes: int, cardinality: int) -> float:
    """
    Equalodds in percent from fractional (target, bias value) accuracies.

    Mean over targets of the accuracy gap between bias values; with more than two
    bias values the gap is the mean absolute difference over unordered pairs.
    """
    gaps = []
    for y in range(num_classes):
        pair_gaps = [abs(group_accs[(y, a)] - group_accs[(y, b)]) for a, b in combinations(range(cardinality), 2)]
        gaps.append(sum(pair_gaps) / len(pair_gaps))
    return sum(gaps) / num_classes * 100.0


def _cell_accuracy(correct: np.ndarray, mask: np.ndarray) -> Optional[float]:
    count = int(mask.sum())
    if count == 0:
        return None
    return float(correct[mask].sum()) / count


def evaluate(preds: PredictionSet, schema: TaskSchema, bias_attrs: Optional[Sequence[str]] = None,
             metadata: Optional[Dict[str, Any]] = None) -> MetricsReport:
    """
    Group accuracies and Equalodds for the measured bias attributes.

    Average and worst accuracy run over the joint (target, every measured bias value) cells;
    with one attribute these are the (target, bias value) groups.

    Raises:
        EvaluationError: a (target, bias value) group is empty
    """
    attrs = list(bias_attrs or schema.bias_names)
    if not attrs:
        raise EvaluationError("At least one bias attribute is needed")
    if len(preds) == 0:
        raise EvaluationError("Prediction set is empty")
    correct = (preds.predicted == preds.targets).astype(np.float64)
    k = schema.num_classes

    attr_tables: Dict[str, Dict[Tuple[int, int], float]] = {}
    equalodds: Dict[str, float] = {}
    for attr in attrs:
        card = schema.cardinality(attr)
        labels = preds.bias_labels(attr)
        table = {}
        for y, b in product(range(k), range(card)):
            acc = _cell_accuracy(correct, (preds.targets == y) & (labels == b))
            if acc is None:
                raise EvaluationError(f"Empty evaluation group (target={y}, {attr}={b})", target=y, attr=attr, bias=b)
            table[(y, b)] = acc
        attr_tables[attr] = table
        equalodds[attr] = equalodds_from_table(table, k, card)

    joint: Dict[Tuple[int, ...], float] = {}
    ranges = [range(k)] + [range(schema.cardinality(a)) for a in attrs]
    label_cols = [preds.bias_labels(a) for a in attrs]
    for cell in product(*ranges):
        mask = preds.targets == cell[0]
        for col, value in zip(label_cols, cell[1:]):
            mask = mask & (col == value)
        acc = _cell_accuracy(correct, mask)
        if acc is None:
            logger.debug(f"Joint cell {cell} is empty; left out of average/worst accuracy")
            continue
        joint[cell] = acc

    accs = list(joint.values())
    return MetricsReport(
        group_accuracy={cell: acc * 100.0 for cell, acc in joint.items()},
        attr_group_accuracy={a: {c: v * 100.0 for c, v in t.items()} for a, t in attr_tables.items()},
        average_group_acc=sum(accs) / len(accs) * 100.0,
        worst_group_acc=min(accs) * 100.0,
        equalodds=equalodds,
        avg_bias=sum(equalodds.values()) / len(equalodds),
        overall_acc=float(correct.mean()) * 100.0,
        n=len(preds),
        metadata=dict(metadata or {}),
    )


def _relative(before: float, after: float) -> Optional[float]:
    if before == 0:
        return 0.0 if after == 0 else None
    return (after - before) / before


def _reduction(before: float, after: float) -> Optional[float]:
    if before == 0:
        return 0.0 if after == 0 else None
    return (before - after) / before


def compare(before: MetricsReport, after: MetricsReport) -> DeltaReport:
    """Absolute and relative deltas; bias reduction is (before - after) / before."""
    if before.bias_attrs != after.bias_attrs or set(before.group_accuracy) != set(after.group_accuracy):
        raise EvaluationError("Reports were computed on different schemas or bias attributes",
                              before=before.bias_attrs, after=after.bias_attrs)
    fields = {
        "average_group_acc": (before.average_group_acc, after.average_group_acc),
        "worst_group_acc": (before.worst_group_acc, after.worst_group_acc),
        "avg_bias": (before.avg_bias, after.avg_bias),
        "overall_acc": (before.overall_acc, after.overall_acc),
    }
    for attr in before.bias_attrs:
        fields[f"equalodds:{attr}"] = (before.equalodds[attr], after.equalodds[attr])
    deltas = {name: a - b for name, (b, a) in fields.items()}
    relative = {name: _relative(b, a) for name, (b, a) in fields.items()}
    regression = after.avg_bias > before.avg_bias
    if regression:
        logger.warning(f"Model bias increased after erasing: {before.avg_bias:.2f} -> {after.avg_bias:.2f}")
    return DeltaReport(
        before=before,
        after=after,
        deltas=deltas,
        relative=relative,
        bias_reduction=_reduction(before.avg_bias, after.avg_bias),
        attr_bias_reduction={a: _reduction(before.equalodds[a], after.equalodds[a]) for a in before.bias_attrs},
        regression=regression,
    )


def format_rows(rows: Sequence[Tuple[str, MetricsReport]]) -> str:
    """Aligned plain-text table: Average ACC, Worst ACC, Model Bias (per attribute when several)."""
    attrs = rows[0][1].bias_attrs
    bias_cols = ["Model Bias"] if len(attrs) == 1 else [f"Bias ({a})" for a in attrs] + ["Avg Bias"]
    header = ["Method", "Average ACC", "Worst ACC"] + bias_cols
    body = []
    for label, report in rows:
        biases = [report.avg_bias] if len(attrs) == 1 else [report.equalodds[a] for a in attrs] + [report.avg_bias]
        body.append([label, f"{report.average_group_acc:.2f}", f"{report.worst_group_acc:.2f}"] + [f"{v:.2f}" for v in biases])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
             for r in [header] + body]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)
