"""
Rule Distillation
Recovers the deployed model's bias-only rule p(y | bias) from its outputs alone and
stores it in a small patch model.

For a calibration example x with target y and bias value b, the distilled target is

    softmax( (1/k) * [ log M(x) + sum_{i != y} mean_{x' in S(i, b)} log M(x') ] )

where S(i, b) holds the calibration examples with target i and bias value b. The
averaging over one example from every target class cancels the target signal and
leaves the bias signal. With the cell anchor, log M(x) is replaced by the mean of
S(y, b), which makes the target a function of b alone; patches distilled that way can
be stacked without each one also removing a share of the target evidence. No code
path here reads model parameters.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

import nnet
from dataset import Dataset, group_index
from errors import ConfigError, ContrastCellError, InvalidInputError, ShapeError
from oracle_client import OracleHandle
from prob_core import ProbVector, softmax_rows

logger = logging.getLogger(__name__)

CONTRAST_MODES = ("multi", "single")
ANCHORS = ("example", "cell")


# --- Data Models ---
@dataclass
class ContrastIndex:
    """(target, bias value) cells of one bias attribute plus the cached oracle log-outputs"""

    bias_attr: str
    cells: Dict[tuple, List[int]]
    log_probs: np.ndarray
    cell_mean_logs: np.ndarray
    oracle_id: str
    calibration_digest: str

    @property
    def num_classes(self) -> int:
        return int(self.log_probs.shape[1])

    def cell_mean(self, target: int, bias_value: int) -> np.ndarray:
        return self.cell_mean_logs[target, bias_value]


@dataclass
class DistilledTargets:
    """Soft targets p(y | bias) aligned 1:1 with the calibration rows"""

    probs: np.ndarray
    bias_attr: str
    oracle_id: str
    seed: int = 0
    mode: str = "multi"
    scale: Optional[float] = None
    anchor: str = "example"
    calibration_digest: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.probs.shape[0])

    def __getitem__(self, i: int) -> ProbVector:
        return ProbVector(self.probs[i])

    @property
    def targets(self) -> List[ProbVector]:
        return [ProbVector(row) for row in self.probs]

    def as_array(self) -> np.ndarray:
        return self.probs

    def to_dict(self) -> Dict[str, Any]:
        return {
            "bias_attr": self.bias_attr,
            "oracle_id": self.oracle_id,
            "seed": self.seed,
            "mode": self.mode,
            "scale": self.scale,
            "anchor": self.anchor,
            "calibration_digest": self.calibration_digest,
            "metadata": self.metadata,
            "targets": self.probs.tolist(),
        }

    def save_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load_json(cls, path: str) -> "DistilledTargets":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        return cls(
            probs=np.asarray(doc["targets"], dtype=np.float64),
            bias_attr=doc["bias_attr"],
            oracle_id=doc["oracle_id"],
            seed=doc.get("seed", 0),
            mode=doc.get("mode", "multi"),
            scale=doc.get("scale"),
            anchor=doc.get("anchor", "example"),
            calibration_digest=doc.get("calibration_digest", ""),
            metadata=doc.get("metadata") or {},
        )


@dataclass
class PatchArch:
    hidden: List[int]
    activation: str = "relu"
    output_mode: str = "softmax"


# --- Contrast Index ---
def _missing_cells(calibration: Dataset, bias_attr: str) -> List[str]:
    cells = group_index(calibration, bias_attr)
    return [f"(target={y}, bias={b})" for (y, b), idx in sorted(cells.items()) if not idx]


def _validate_cells(calibration: Dataset, bias_attrs: Sequence[str]) -> None:
    if len(calibration) == 0:
        raise ContrastCellError("Calibration set is empty")
    problems = {}
    for attr in bias_attrs:
        missing = _missing_cells(calibration, attr)
        if missing:
            problems[attr] = missing
    if problems:
        listing = "; ".join(f"{attr}: {', '.join(cells)}" for attr, cells in problems.items())
        raise ContrastCellError(f"Calibration set lacks contrast cells {listing}", missing=problems)


def _index_from_logs(calibration: Dataset, bias_attr: str, log_probs: np.ndarray, oracle_id: str) -> ContrastIndex:
    k = calibration.schema.num_classes
    card = calibration.schema.cardinality(bias_attr)
    cells = group_index(calibration, bias_attr)
    means = np.empty((k, card, k))
    for (y, b), idx in cells.items():
        means[y, b] = log_probs[idx].mean(axis=0)
    return ContrastIndex(bias_attr, cells, log_probs, means, oracle_id, calibration.digest())


def _oracle_logs(calibration: Dataset, oracle: OracleHandle) -> np.ndarray:
    if oracle.k != calibration.schema.num_classes:
        raise ShapeError(f"Oracle has {oracle.k} classes, schema has {calibration.schema.num_classes}")
    probs = oracle.query_batch(calibration.features)
    return np.log(np.vstack([p.probs for p in probs]))


def build_contrast_index(calibration: Dataset, oracle: OracleHandle, bias_attr: str) -> ContrastIndex:
    """
    Query the oracle once per calibration example and cache per-cell mean log-outputs.

    Raises:
        ContrastCellError: some (target, bias value) cell is empty; all missing cells are listed
    """
    return build_contrast_indices(calibration, oracle, [bias_attr])[bias_attr]


def build_contrast_indices(calibration: Dataset, oracle: OracleHandle, bias_attrs: Sequence[str]) -> Dict[str, ContrastIndex]:
    """One oracle pass shared by the indices of several bias attributes."""
    for attr in bias_attrs:
        calibration.schema.bias_position(attr)
    _validate_cells(calibration, bias_attrs)
    log_probs = _oracle_logs(calibration, oracle)
    log_probs.setflags(write=False)
    indices = {attr: _index_from_logs(calibration, attr, log_probs, oracle.oracle_id) for attr in bias_attrs}
    logger.info(f"✓ Built contrast indices for {list(bias_attrs)} over {len(calibration)} calibration examples")
    return indices


# --- Distilled Targets ---
def _contrast_logs_multi(calibration: Dataset, index: ContrastIndex) -> np.ndarray:
    k = index.num_classes
    y = calibration.targets
    b = calibration.bias_labels(index.bias_attr)
    # per example: cell means of every class at its bias value, shape (k, n, k)
    per_class = index.cell_mean_logs[:, b, :]
    keep = (np.arange(k)[:, None] != y[None, :]).astype(np.float64)
    return np.sum(per_class * keep[:, :, None], axis=0)


def _contrast_logs_single(calibration: Dataset, index: ContrastIndex, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    k = index.num_classes
    b = calibration.bias_labels(index.bias_attr)
    total = np.zeros_like(index.log_probs)
    for n_i, (y_n, b_n) in enumerate(zip(calibration.targets.tolist(), b.tolist())):
        for i in range(k):
            if i == y_n:
                continue
            pick = index.cells[(i, b_n)][int(rng.integers(len(index.cells[(i, b_n)])))]
            total[n_i] += index.log_probs[pick]
    return total


def resolve_anchor(anchor: Optional[str], num_attrs: int) -> str:
    """None picks 'cell' when several attributes are distilled for stacking, else 'example'."""
    if anchor is None:
        return "cell" if num_attrs > 1 else "example"
    if anchor not in ANCHORS:
        raise ConfigError(f"anchor must be one of {ANCHORS}, got '{anchor}'")
    return anchor


def distill_targets(calibration: Dataset, index: ContrastIndex, oracle: Optional[OracleHandle] = None,
                    mode: str = "multi", scale: Optional[float] = None, seed: int = 0,
                    anchor: str = "example") -> DistilledTargets:
    """
    Compute p(y | bias) for every calibration example.

    Args:
        calibration: the dataset the index was built on
        index: ContrastIndex holding the cached oracle log-outputs
        oracle: the oracle behind the index (identity check only; no new queries)
        mode: 'multi' averages each contrast cell, 'single' draws one seeded contrast per class
        scale: factor applied to the bracketed sum; defaults to 1/k
        seed: seed for the single-contrast draws
        anchor: 'example' uses log M(x) for the example's own class, 'cell' uses the
            mean log-output of its own (target, bias value) cell, so the target depends
            on the bias value alone
    """
    if mode not in CONTRAST_MODES:
        raise ConfigError(f"contrast mode must be one of {CONTRAST_MODES}, got '{mode}'")
    if anchor not in ANCHORS:
        raise ConfigError(f"anchor must be one of {ANCHORS}, got '{anchor}'")
    if len(calibration) != index.log_probs.shape[0] or calibration.digest() != index.calibration_digest:
        raise InvalidInputError("Contrast index was built on a different calibration set")
    if oracle is not None and oracle.oracle_id != index.oracle_id:
        raise InvalidInputError(f"Contrast index came from oracle {index.oracle_id}, not {oracle.oracle_id}")
    k = index.num_classes
    factor = (1.0 / k) if scale is None else float(scale)
    if not factor > 0:
        raise ConfigError(f"scale must be positive, got {scale}")

    if mode == "multi":
        contrast = _contrast_logs_multi(calibration, index)
    else:
        contrast = _contrast_logs_single(calibration, index, seed)
    if anchor == "cell":
        own = index.cell_mean_logs[calibration.targets, calibration.bias_labels(index.bias_attr)]
    else:
        own = index.log_probs
    probs = softmax_rows(factor * (own + contrast))

    logger.info(f"✓ Distilled {len(calibration)} targets for '{index.bias_attr}' ({mode} contrast, {anchor} anchor)")
    return DistilledTargets(
        probs=probs,
        bias_attr=index.bias_attr,
        oracle_id=index.oracle_id,
        seed=seed,
        mode=mode,
        scale=scale,
        anchor=anchor,
        calibration_digest=index.calibration_digest,
    )


# --- Patch Training ---
def train_patch(calibration: Dataset, targets: DistilledTargets, config: nnet.TrainConfig,
                arch: PatchArch, on_epoch=None) -> nnet.MlpModel:
    """Fit a patch model G with output dim k to the distilled targets (soft-target KL)."""
    if len(targets) != len(calibration):
        raise ShapeError(f"{len(targets)} distilled targets for {len(calibration)} calibration examples")
    if config.loss != "soft_target_kl":
        config = replace(config, loss="soft_target_kl")
    schema = calibration.schema
    dims = [schema.feature_dim] + list(arch.hidden) + [schema.num_classes]
    patch = nnet.build_mlp(
        dims,
        activations=[arch.activation] * len(arch.hidden),
        output_mode=arch.output_mode,
        seed=config.seed,
        metadata={
            "role": "patch",
            "bias_attr": targets.bias_attr,
            "trained_on": calibration.digest(),
            "oracle_id": targets.oracle_id,
        },
    )
    trained = nnet.train(patch, calibration, config, targets=targets, on_epoch=on_epoch)
    logger.info(f"✓ Trained patch for '{targets.bias_attr}' {dims}")
    return trained
