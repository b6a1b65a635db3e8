"""
Probability Core
Log-space probability algebra for the eraser: softmax, prior subtraction
(erase), multi-rule stacking and the inverse prior injection.

All arithmetic is float64. Row-batched forms operate on (n, k) arrays; the
single-vector operations are the one-row case of the same arithmetic.
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from errors import InvalidInputError, ShapeError

DEFAULT_FLOOR = 1e-12
SUM_TOLERANCE = 1e-9

ArrayLike = Union[Sequence[float], np.ndarray]


def floor_rows(probs: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Floor every entry at `floor`, then renormalize each row to sum to 1."""
    arr = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("Probabilities must be finite")
    if np.any(arr < 0):
        raise InvalidInputError("Probabilities must be non-negative")
    arr = np.maximum(arr, floor)
    return arr / arr.sum(axis=-1, keepdims=True)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ProbVector:
    """Length-k categorical distribution, floored and renormalized on ingest"""

    probs: np.ndarray
    floor: float = field(default=DEFAULT_FLOOR, repr=False)

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1:
            raise ShapeError(f"ProbVector must be one-dimensional, got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise ShapeError("ProbVector needs at least 2 classes", k=int(arr.shape[0]))
        if np.all(arr == 0):
            raise InvalidInputError("ProbVector cannot be all zeros")
        object.__setattr__(self, "probs", _readonly(floor_rows(arr, self.floor)))

    @property
    def k(self) -> int:
        return int(self.probs.shape[0])

    def log(self) -> np.ndarray:
        return np.log(self.probs)

    def argmax(self) -> int:
        # np.argmax resolves ties toward the lowest index
        return int(np.argmax(self.probs))

    def tolist(self) -> List[float]:
        return [float(v) for v in self.probs]

    def allclose(self, other: "ProbVector", atol: float = 1e-12) -> bool:
        return self.k == other.k and bool(np.allclose(self.probs, other.probs, rtol=0.0, atol=atol))

    def __len__(self) -> int:
        return self.k

    def __getitem__(self, j: int) -> float:
        return float(self.probs[j])


@dataclass(frozen=True, eq=False)
class LogitVector:
    """Length-k finite log-odds; only defined up to an additive constant"""

    logits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.logits, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] < 2:
            raise ShapeError(f"LogitVector must be one-dimensional with k >= 2, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("Logits must be finite")
        object.__setattr__(self, "logits", _readonly(arr))

    @property
    def k(self) -> int:
        return int(self.logits.shape[0])


# ==================== CONSTRUCTORS ====================

def uniform(k: int) -> ProbVector:
    if k < 2:
        raise ShapeError("Uniform distribution needs k >= 2", k=k)
    return ProbVector(np.full(k, 1.0 / k))


def random_prob_vector(rng: np.random.Generator, k: int, concentration: float = 1.0) -> ProbVector:
    """Draw a strictly positive distribution from a symmetric Dirichlet."""
    return ProbVector(rng.dirichlet(np.full(k, concentration)))


def from_scores(scores: ArrayLike, k: Optional[int] = None) -> ProbVector:
    """
    Build a ProbVector from raw model scores.

    A single score for a binary task expands to [1 - s, s]; a vector of
    independent sigmoid scores is divided by its sum.
    """
    arr = np.atleast_1d(np.asarray(scores, dtype=np.float64))
    if arr.shape[0] == 1 and (k is None or k == 2):
        s = float(arr[0])
        if not 0.0 <= s <= 1.0:
            raise InvalidInputError(f"Single score must lie in [0, 1], got {s}")
        arr = np.array([1.0 - s, s])
    if k is not None and arr.shape[0] != k:
        raise ShapeError(f"Expected {k} scores, got {arr.shape[0]}")
    return ProbVector(arr)


def to_logits(p: ProbVector) -> LogitVector:
    return LogitVector(p.log())


def _as_logit_array(logits: Union[LogitVector, ArrayLike]) -> np.ndarray:
    if isinstance(logits, LogitVector):
        return logits.logits
    return LogitVector(logits).logits


# ==================== ROW-BATCHED OPERATIONS ====================

def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("Logits must be finite")
    # logsumexp subtracts the row max before exponentiating
    return np.exp(z - logsumexp(z, axis=-1, keepdims=True))


def _check_rows(reference: np.ndarray, other: np.ndarray, what: str) -> None:
    if other.shape != reference.shape:
        raise ShapeError(f"{what} has shape {other.shape}, expected {reference.shape}")


def erase_multi_rows(model: np.ndarray, rules: Iterable[np.ndarray], floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """softmax(log model - sum_m log rule_m), row by row."""
    model_arr = floor_rows(np.atleast_2d(model), floor)
    rules = list(rules)
    if not rules:
        return model_arr
    z = np.log(model_arr)
    for rule in rules:
        rule_arr = floor_rows(np.atleast_2d(rule), floor)
        _check_rows(model_arr, rule_arr, "bias rule")
        z = z - np.log(rule_arr)
    return softmax_rows(z)


def erase_rows(model: np.ndarray, rule: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    return erase_multi_rows(model, [rule], floor)


def inject_prior_rows(model: np.ndarray, prior: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    model_arr = floor_rows(np.atleast_2d(model), floor)
    prior_arr = np.atleast_2d(np.asarray(prior, dtype=np.float64))
    if np.any(prior_arr <= 0):
        raise InvalidInputError("Prior must be strictly positive")
    prior_arr = floor_rows(prior_arr, floor)
    _check_rows(model_arr, prior_arr, "prior")
    return softmax_rows(np.log(model_arr) + np.log(prior_arr))


# ==================== VECTOR OPERATIONS ====================

def softmax(logits: Union[LogitVector, ArrayLike]) -> ProbVector:
    z = _as_logit_array(logits)
    return ProbVector(softmax_rows(z[None, :])[0])


def _check_same_k(model: ProbVector, other: ProbVector, what: str) -> None:
    if other.k != model.k:
        raise ShapeError(f"{what} has {other.k} classes, model has {model.k}", expected=model.k, got=other.k)


def erase(model: ProbVector, bias_rule: ProbVector) -> ProbVector:
    """Remove a biased rule from a model output: softmax(log model - log bias_rule)."""
    _check_same_k(model, bias_rule, "bias rule")
    return ProbVector(erase_rows(model.probs[None, :], bias_rule.probs[None, :], model.floor)[0], model.floor)


def erase_multi(model: ProbVector, bias_rules: Sequence[ProbVector]) -> ProbVector:
    """Stack several bias rules; an empty list returns the model unchanged."""
    if not bias_rules:
        return model
    for rule in bias_rules:
        _check_same_k(model, rule, "bias rule")
    rows = erase_multi_rows(model.probs[None, :], [r.probs[None, :] for r in bias_rules], model.floor)
    return ProbVector(rows[0], model.floor)


def inject_prior(model: ProbVector, prior: ProbVector) -> ProbVector:
    """Inverse of erase: softmax(log model + log prior)."""
    _check_same_k(model, prior, "prior")
    return ProbVector(inject_prior_rows(model.probs[None, :], prior.probs[None, :], model.floor)[0], model.floor)
