"""
Feed-Forward Network
Small multilayer perceptron with exact backpropagation. Serves as the desk-scale
deployed model, the multi-task unfair baseline (auxiliary bias head) and the
patch model that stores a distilled bias rule.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp, xlogy

from errors import ConfigError, InvalidInputError, ModelLoadError, NumericDivergenceError, NumericError, ShapeError
from prob_core import DEFAULT_FLOOR, ProbVector, softmax_rows

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "tanh")
OUTPUT_MODES = ("softmax", "sigmoid")
LOSSES = ("hard_label_ce", "soft_target_kl", "multitask_ce")
OPTIMIZERS = ("sgd", "adam")
KL_DIRECTIONS = ("forward", "reverse")

GRAD_CHECK_THRESHOLD = 1e-4
# denominators below this are treated as absolute error
_REL_ERR_FLOOR = 1e-6


# --- Data Models ---
@dataclass
class MlpModel:
    """Weights are row-major (out x in); one activation name per hidden layer"""

    layer_dims: List[int]
    activations: List[str]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    output_mode: str = "softmax"
    aux_weight: Optional[np.ndarray] = None
    aux_bias: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if self.aux_weight is not None:
            self.aux_weight = np.asarray(self.aux_weight, dtype=np.float64)
            self.aux_bias = np.asarray(self.aux_bias, dtype=np.float64)
        problems = self.validate()
        if problems:
            raise ShapeError("Invalid model: " + "; ".join(problems), problems=problems)

    def validate(self) -> List[str]:
        problems = []
        if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
            return [f"layer_dims must hold at least two positive sizes, got {self.layer_dims}"]
        if self.layer_dims[-1] < 2:
            problems.append("output dimension must be at least 2")
        n_layers = len(self.layer_dims) - 1
        if len(self.activations) != n_layers - 1:
            problems.append(f"expected {n_layers - 1} activations, got {len(self.activations)}")
        for name in self.activations:
            if name not in ACTIVATIONS:
                problems.append(f"unknown activation '{name}'")
        if self.output_mode not in OUTPUT_MODES:
            problems.append(f"unknown output_mode '{self.output_mode}'")
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            problems.append(f"expected {n_layers} weight/bias blocks")
            return problems
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expected:
                problems.append(f"W{i} has shape {w.shape}, expected {expected}")
            if b.shape != (self.layer_dims[i + 1],):
                problems.append(f"b{i} has shape {b.shape}, expected ({self.layer_dims[i + 1]},)")
        if self.aux_weight is not None:
            if self.aux_bias is None or self.aux_weight.ndim != 2:
                problems.append("aux head needs a 2-D weight and a bias")
            elif self.aux_weight.shape[1] != self.layer_dims[-2] or self.aux_bias.shape != (self.aux_weight.shape[0],):
                problems.append(f"aux head shape {self.aux_weight.shape} does not fit representation width {self.layer_dims[-2]}")
        for name, arr in self.parameter_blocks():
            if not np.all(np.isfinite(arr)):
                problems.append(f"{name} holds non-finite values")
        return problems

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def hidden_widths(self) -> List[int]:
        return self.layer_dims[1:-1]

    @property
    def has_aux_head(self) -> bool:
        return self.aux_weight is not None

    def parameter_blocks(self) -> List[Tuple[str, np.ndarray]]:
        blocks = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            blocks.append((f"W{i}", w))
            blocks.append((f"b{i}", b))
        if self.aux_weight is not None:
            blocks.append(("W_aux", self.aux_weight))
            blocks.append(("b_aux", self.aux_bias))
        return blocks

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_dims=list(self.layer_dims),
            activations=list(self.activations),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            output_mode=self.output_mode,
            aux_weight=None if self.aux_weight is None else self.aux_weight.copy(),
            aux_bias=None if self.aux_bias is None else self.aux_bias.copy(),
            metadata=json.loads(json.dumps(self.metadata)),
        )


@dataclass
class TrainConfig:
    """Optimizer and loss settings; defaults are Adam(0.9, 0.999, 1e-8), lr 1e-3, 200 epochs, batch 64"""

    loss: str = "hard_label_ce"
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0
    kl_direction: str = "forward"

    def validate(self) -> List[str]:
        errors = []
        if self.loss not in LOSSES:
            errors.append(f"loss must be one of {LOSSES}, got '{self.loss}'")
        if not self.learning_rate > 0:
            errors.append("learning_rate must be positive")
        if self.epochs < 0:
            errors.append("epochs must be non-negative")
        if self.batch_size <= 0:
            errors.append("batch_size must be positive")
        if self.optimizer not in OPTIMIZERS:
            errors.append(f"optimizer must be one of {OPTIMIZERS}")
        if self.l2 < 0:
            errors.append("l2 must be non-negative")
        if self.kl_direction not in KL_DIRECTIONS:
            errors.append(f"kl_direction must be one of {KL_DIRECTIONS}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            errors.append("adam betas must lie in [0, 1) and eps must be positive")
        if not 0 <= self.seed < 2 ** 64:
            errors.append("seed must be an unsigned 64-bit integer")
        return errors

    @classmethod
    def from_dict(cls, raw: Optional[Dict[str, Any]]) -> "TrainConfig":
        raw = dict(raw or {})
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"Unknown training options: {', '.join(unknown)}")
        return cls(**raw)

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class GradCheckReport:
    """Maximum relative error per parameter block"""

    errors: Dict[str, float]
    threshold: float = GRAD_CHECK_THRESHOLD

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold


# --- Construction ---
def build_mlp(layer_dims: Sequence[int], activations: Optional[Sequence[str]] = None,
              output_mode: str = "softmax", seed: int = 0, aux_dim: Optional[int] = None,
              metadata: Optional[Dict[str, Any]] = None) -> MlpModel:
    """
    Build a network with Glorot-uniform weights and zero biases.

    Args:
        layer_dims: input, hidden..., output sizes
        activations: one name per hidden layer (defaults to relu everywhere)
        output_mode: softmax or sigmoid
        seed: seed of the PCG64 generator drawing the weights
        aux_dim: when set, adds an auxiliary softmax head of this size on the last representation
    """
    dims = [int(d) for d in layer_dims]
    if activations is None:
        activations = ["relu"] * (len(dims) - 2)
    rng = np.random.default_rng(seed)

    def glorot(fan_out: int, fan_in: int) -> np.ndarray:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    weights = [glorot(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
    aux_weight = aux_bias = None
    if aux_dim:
        aux_weight = glorot(int(aux_dim), dims[-2])
        aux_bias = np.zeros(int(aux_dim))
    meta = dict(metadata or {})
    meta.setdefault("seed", int(seed))
    return MlpModel(dims, list(activations), weights, biases, output_mode, aux_weight, aux_bias, meta)


def default_patch_dims(feature_dim: int, num_classes: int, deployed_hidden: Sequence[int]) -> List[int]:
    """One hidden layer at half the deployed model's hidden width."""
    if deployed_hidden:
        width = max(1, max(deployed_hidden) // 2)
    else:
        width = max(2, feature_dim // 2)
    return [feature_dim, width, num_classes]


# --- Forward Pass ---
def _activate(name: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0).astype(np.float64)
    return 1.0 - post * post


def _forward(model: MlpModel, X: np.ndarray):
    acts = [X]
    pres = []
    h = X
    for i, name in enumerate(model.activations):
        z = h @ model.weights[i].T + model.biases[i]
        h = _activate(name, z)
        pres.append(z)
        acts.append(h)
    logits = h @ model.weights[-1].T + model.biases[-1]
    aux_logits = None
    if model.aux_weight is not None:
        aux_logits = h @ model.aux_weight.T + model.aux_bias
    return acts, pres, logits, aux_logits


def _output_probs(model: MlpModel, logits: np.ndarray) -> np.ndarray:
    if model.output_mode == "softmax":
        return softmax_rows(logits)
    scores = expit(logits)
    return scores / scores.sum(axis=1, keepdims=True)


def _output_log_probs(model: MlpModel, logits: np.ndarray) -> np.ndarray:
    if model.output_mode == "softmax":
        return logits - logsumexp(logits, axis=1, keepdims=True)
    log_scores = -np.logaddexp(0.0, -logits)
    return log_scores - logsumexp(log_scores, axis=1, keepdims=True)


def _as_matrix(model: MlpModel, features) -> np.ndarray:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"Expected {model.input_dim} features, got shape {X.shape}",
                         expected=model.input_dim, got=list(X.shape))
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("Features must be finite")
    return X


def predict_proba(model: MlpModel, features) -> np.ndarray:
    """Batched forward pass returning an (n, k) array of class probabilities."""
    X = _as_matrix(model, features)
    with np.errstate(over="ignore", invalid="ignore"):
        _, _, logits, _ = _forward(model, X)
        probs = _output_probs(model, logits) if np.all(np.isfinite(logits)) else logits
    if not np.all(np.isfinite(probs)):
        raise NumericError("Forward pass produced non-finite activations")
    return probs


def forward_probs(model: MlpModel, features) -> ProbVector:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"forward_probs takes one feature vector, got shape {x.shape}")
    return ProbVector(predict_proba(model, x[None, :])[0])


# --- Losses ---
@dataclass
class _Targets:
    main: np.ndarray
    aux: Optional[np.ndarray] = None

    def take(self, idx: np.ndarray) -> "_Targets":
        return _Targets(self.main[idx], None if self.aux is None else self.aux[idx])


def _one_hot(labels: np.ndarray, width: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise InvalidInputError(f"Labels must lie in [0, {width})")
    out = np.zeros((labels.shape[0], width))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _soft_matrix(targets, n: int, k: int) -> np.ndarray:
    if hasattr(targets, "as_array"):
        targets = targets.as_array()
    elif isinstance(targets, (list, tuple)) and targets and isinstance(targets[0], ProbVector):
        targets = np.vstack([t.probs for t in targets])
    T = np.asarray(targets, dtype=np.float64)
    if T.shape != (n, k):
        raise ShapeError(f"Soft targets have shape {T.shape}, expected {(n, k)}")
    if not np.all(np.isfinite(T)) or np.any(T < 0) or not np.allclose(T.sum(axis=1), 1.0, atol=1e-6):
        raise InvalidInputError("Soft targets must be finite probability rows")
    return T


def _prepare_targets(model: MlpModel, data, loss: str, targets=None, bias_attr: Optional[str] = None) -> _Targets:
    n, k = len(data), model.num_classes
    if loss == "soft_target_kl":
        if targets is None:
            raise InvalidInputError("soft_target_kl needs soft targets")
        return _Targets(_soft_matrix(targets, n, k))
    labels = data.targets if targets is None or loss == "multitask_ce" else np.asarray(targets)
    if len(labels) != n:
        raise ShapeError(f"{len(labels)} labels for {n} examples")
    main = _one_hot(labels, k)
    if loss == "hard_label_ce":
        return _Targets(main)
    if not model.has_aux_head:
        raise ShapeError("multitask_ce needs a model with an auxiliary bias head")
    attr = bias_attr or data.schema.bias_names[0]
    aux_labels = np.asarray(targets) if targets is not None else data.bias_labels(attr)
    return _Targets(main, _one_hot(aux_labels, model.aux_weight.shape[0]))


def _loss_and_logit_grads(model: MlpModel, logits: np.ndarray, aux_logits: Optional[np.ndarray],
                          targets: _Targets, loss: str, kl_direction: str):
    n = logits.shape[0]
    T = targets.main
    log_p = _output_log_probs(model, logits)
    p = np.exp(log_p)
    factor = 1.0 if model.output_mode == "softmax" else 1.0 - expit(logits)

    if loss == "soft_target_kl" and kl_direction == "reverse":
        log_t = np.log(np.maximum(T, DEFAULT_FLOOR))
        gap = log_p - log_t
        row = np.sum(p * gap, axis=1, keepdims=True)
        value = float(np.mean(row))
        d_logits = p * (gap - row) * factor / n
    else:
        value = float(np.mean(np.sum(xlogy(T, T) - T * log_p, axis=1)))
        d_logits = (p - T) * factor / n

    d_aux = None
    if loss == "multitask_ce":
        aux_log_q = aux_logits - logsumexp(aux_logits, axis=1, keepdims=True)
        value += float(np.mean(-np.sum(targets.aux * aux_log_q, axis=1)))
        d_aux = (np.exp(aux_log_q) - targets.aux) / n
    return value, d_logits, d_aux


def _l2_penalty(model: MlpModel, l2: float) -> float:
    if l2 == 0:
        return 0.0
    total = sum(float(np.sum(w * w)) for w in model.weights)
    if model.aux_weight is not None:
        total += float(np.sum(model.aux_weight * model.aux_weight))
    return 0.5 * l2 * total


def _loss_value(model: MlpModel, X: np.ndarray, targets: _Targets, loss: str,
                kl_direction: str = "forward", l2: float = 0.0) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        _, _, logits, aux_logits = _forward(model, X)
        value, _, _ = _loss_and_logit_grads(model, logits, aux_logits, targets, loss, kl_direction)
    return value + _l2_penalty(model, l2)


def _loss_and_grads(model: MlpModel, X: np.ndarray, targets: _Targets, loss: str,
                    kl_direction: str = "forward", l2: float = 0.0) -> Tuple[float, List[np.ndarray]]:
    """Return the batch-mean loss and gradients aligned with model.parameter_blocks()."""
    with np.errstate(over="ignore", invalid="ignore"):
        acts, pres, logits, aux_logits = _forward(model, X)
        value, d_logits, d_aux = _loss_and_logit_grads(model, logits, aux_logits, targets, loss, kl_direction)

        n_layers = len(model.weights)
        g_w: List[Optional[np.ndarray]] = [None] * n_layers
        g_b: List[Optional[np.ndarray]] = [None] * n_layers
        h_last = acts[-1]
        g_w[-1] = d_logits.T @ h_last
        g_b[-1] = d_logits.sum(axis=0)
        d_h = d_logits @ model.weights[-1]
        aux_grads = []
        if model.aux_weight is not None:
            if d_aux is None:
                d_aux = np.zeros((X.shape[0], model.aux_weight.shape[0]))
            aux_grads = [d_aux.T @ h_last, d_aux.sum(axis=0)]
            d_h = d_h + d_aux @ model.aux_weight
        for i in reversed(range(len(model.activations))):
            d_pre = d_h * _activation_grad(model.activations[i], pres[i], acts[i + 1])
            g_w[i] = d_pre.T @ acts[i]
            g_b[i] = d_pre.sum(axis=0)
            if i > 0:
                d_h = d_pre @ model.weights[i]

    if l2:
        g_w = [g + l2 * w for g, w in zip(g_w, model.weights)]
        if aux_grads:
            aux_grads[0] = aux_grads[0] + l2 * model.aux_weight
    grads = []
    for gw, gb in zip(g_w, g_b):
        grads.extend([gw, gb])
    grads.extend(aux_grads)
    return value + _l2_penalty(model, l2), grads


# --- Optimizers ---
class _Sgd:
    def __init__(self, config: TrainConfig):
        self.lr = config.learning_rate

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class _Adam:
    def __init__(self, config: TrainConfig, params: List[np.ndarray]):
        self.lr = config.learning_rate
        self.beta1, self.beta2, self.eps = config.beta1, config.beta2, config.eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- Training ---
def train(model: MlpModel, data, config: TrainConfig, targets=None, bias_attr: Optional[str] = None,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> MlpModel:
    """
    Train a copy of `model` on `data` and return it.

    Args:
        model: initialized network (left untouched)
        data: Dataset providing features, target labels and bias labels
        config: TrainConfig; config.loss selects the objective
        targets: soft ProbVector rows for soft_target_kl (array, list or DistilledTargets);
                 optional label override for the hard-label losses
        bias_attr: bias attribute predicted by the auxiliary head under multitask_ce
        on_epoch: callback receiving (epoch, full-data loss) after every epoch

    Raises:
        NumericDivergenceError: loss became NaN or infinite
    """
    problems = config.validate()
    if problems:
        raise ConfigError("Invalid training config: " + "; ".join(problems), problems=problems)
    if len(data) == 0:
        raise InvalidInputError("Cannot train on an empty dataset")

    X = _as_matrix(model, data.features)
    all_targets = _prepare_targets(model, data, config.loss, targets, bias_attr)
    trained = model.copy()
    trained.metadata["seed"] = int(config.seed)
    if config.epochs == 0:
        return trained

    n = X.shape[0]
    batch = min(config.batch_size, n)
    if batch < config.batch_size:
        logger.debug(f"batch_size {config.batch_size} exceeds dataset size {n}; using full batch")
    params = [arr for _, arr in trained.parameter_blocks()]
    optimizer = _Adam(config, params) if config.optimizer == "adam" else _Sgd(config)
    rng = np.random.default_rng(config.seed)

    for epoch in range(1, config.epochs + 1):
        if batch >= n:
            batches = [(X, all_targets)]
        else:
            order = rng.permutation(n)
            batches = [(X[order[s:s + batch]], all_targets.take(order[s:s + batch])) for s in range(0, n, batch)]
        for X_b, T_b in batches:
            value, grads = _loss_and_grads(trained, X_b, T_b, config.loss, config.kl_direction, config.l2)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NumericDivergenceError(epoch, value)
            optimizer.step(params, grads)

        epoch_loss = _loss_value(trained, X, all_targets, config.loss, config.kl_direction, config.l2)
        if not math.isfinite(epoch_loss):
            raise NumericDivergenceError(epoch, epoch_loss)
        logger.debug(f"epoch {epoch}/{config.epochs} loss={epoch_loss:.6f}")
        if on_epoch:
            on_epoch(epoch, epoch_loss)

    logger.info(f"✓ Trained {trained.layer_dims} with {config.loss} for {config.epochs} epochs (final loss {epoch_loss:.5f})")
    return trained


def loss_value(model: MlpModel, data, loss: str, targets=None, bias_attr: Optional[str] = None,
               kl_direction: str = "forward") -> float:
    X = _as_matrix(model, data.features)
    return _loss_value(model, X, _prepare_targets(model, data, loss, targets, bias_attr), loss, kl_direction)


def grad_check(model: MlpModel, batch, loss: str, targets=None, bias_attr: Optional[str] = None,
               step: float = 1e-5, kl_direction: str = "forward") -> GradCheckReport:
    """Compare backprop gradients against central finite differences, block by block."""
    if len(batch) == 0:
        raise InvalidInputError("grad_check needs a non-empty batch")
    X = _as_matrix(model, batch.features)
    batch_targets = _prepare_targets(model, batch, loss, targets, bias_attr)
    perturbed = model.copy()
    _, analytic = _loss_and_grads(perturbed, X, batch_targets, loss, kl_direction)

    errors = {}
    for (name, param), grad in zip(perturbed.parameter_blocks(), analytic):
        worst = 0.0
        flat = param.reshape(-1)
        flat_grad = grad.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + step
            plus = _loss_value(perturbed, X, batch_targets, loss, kl_direction)
            flat[j] = original - step
            minus = _loss_value(perturbed, X, batch_targets, loss, kl_direction)
            flat[j] = original
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(numeric), abs(flat_grad[j]), _REL_ERR_FLOOR)
            worst = max(worst, abs(numeric - flat_grad[j]) / denom)
        errors[name] = worst
    report = GradCheckReport(errors)
    if not report.passed:
        logger.warning(f"Gradient check failed for {loss}: max relative error {report.max_error:.3e}")
    return report


# --- Persistence ---
def to_document(model: MlpModel) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "layer_dims": list(model.layer_dims),
        "activations": list(model.activations),
        "output_mode": model.output_mode,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "aux_head": None if model.aux_weight is None else {
            "weight": model.aux_weight.tolist(),
            "bias": model.aux_bias.tolist(),
        },
        "metadata": model.metadata,
    }


def save(model: MlpModel) -> bytes:
    """Serialize to the versioned JSON document; float repr keeps the round trip exact."""
    return json.dumps(to_document(model), sort_keys=True, separators=(",", ":")).encode("utf-8")


def from_document(doc: Dict[str, Any]) -> MlpModel:
    if not isinstance(doc, dict):
        raise ModelLoadError("Model document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelLoadError(f"Unsupported format_version {version!r}", expected=FORMAT_VERSION)
    try:
        dims = [int(d) for d in doc["layer_dims"]]
        weights = doc["weights"]
        for i, rows in enumerate(weights):
            if len(rows) != dims[i + 1] or any(len(row) != dims[i] for row in rows):
                raise ModelLoadError(f"W{i} does not match declared dims {dims[i + 1]}x{dims[i]}", layer=i)
        aux = doc.get("aux_head") or {}
        return MlpModel(
            layer_dims=dims,
            activations=list(doc["activations"]),
            weights=[np.array(w, dtype=np.float64) for w in weights],
            biases=[np.array(b, dtype=np.float64) for b in doc["biases"]],
            output_mode=doc.get("output_mode", "softmax"),
            aux_weight=np.array(aux["weight"], dtype=np.float64) if aux else None,
            aux_bias=np.array(aux["bias"], dtype=np.float64) if aux else None,
            metadata=dict(doc.get("metadata") or {}),
        )
    except ModelLoadError:
        raise
    except ShapeError as e:
        raise ModelLoadError(f"Inconsistent model document: {e.message}")
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise ModelLoadError(f"Malformed model document: {e}")


def load(data: bytes) -> MlpModel:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ModelLoadError(f"Model document is not valid JSON: {e}")
    return from_document(doc)


def save_file(model: MlpModel, path: str) -> None:
    with open(path, "wb") as f:
        f.write(save(model))
    logger.info(f"✓ Saved {model.metadata.get('role', 'model')} to {path}")


def load_file(path: str) -> MlpModel:
    try:
        with open(path, "rb") as f:
            return load(f.read())
    except OSError as e:
        raise ModelLoadError(f"Cannot read model file {path}: {e}", path=path)
