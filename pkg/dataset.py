"""
Datasets
Task schema, immutable columnar datasets, CSV ingestion, deterministic splits and
synthetic biased-data generators with a controllable target/bias correlation.
"""

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from itertools import product
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import CsvFormatError, DatasetError, GenerationError, SchemaError, SplitError

logger = logging.getLogger(__name__)

TARGET_COLUMN = "target"
BIAS_PREFIX = "bias:"
SIDECAR_SUFFIX = ".meta.json"
DEFAULT_CALIBRATION_FRACTION = 1.0 / 6.0

VARIANTS = ("binary_bias", "multiclass", "two_bias")


# --- Schema & Records ---
@dataclass(frozen=True)
class TaskSchema:
    """k target classes, named bias attributes with their cardinalities, feature width"""

    num_classes: int
    bias_attrs: Tuple[Tuple[str, int], ...]
    feature_dim: int

    def __post_init__(self):
        object.__setattr__(self, "bias_attrs", tuple((str(n), int(c)) for n, c in self.bias_attrs))
        problems = []
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_dim <= 0:
            problems.append(f"feature_dim must be positive, got {self.feature_dim}")
        names = [n for n, _ in self.bias_attrs]
        if len(set(names)) != len(names):
            problems.append(f"bias attribute names must be unique: {names}")
        for name, card in self.bias_attrs:
            if card < 2:
                problems.append(f"bias attribute '{name}' needs cardinality >= 2, got {card}")
        if problems:
            raise SchemaError("; ".join(problems), problems=problems)

    @property
    def bias_names(self) -> List[str]:
        return [n for n, _ in self.bias_attrs]

    def bias_position(self, name: str) -> int:
        for pos, (attr, _) in enumerate(self.bias_attrs):
            if attr == name:
                return pos
        raise SchemaError(f"Unknown bias attribute '{name}'", known=self.bias_names)

    def cardinality(self, name: str) -> int:
        return self.bias_attrs[self.bias_position(name)][1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "num_classes": self.num_classes,
            "bias_attrs": [[n, c] for n, c in self.bias_attrs],
            "feature_dim": self.feature_dim,
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "TaskSchema":
        try:
            return cls(int(doc["num_classes"]), tuple((n, int(c)) for n, c in doc["bias_attrs"]), int(doc["feature_dim"]))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"Malformed schema document: {e}")


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    target: int
    bias: Tuple[int, ...]


class Dataset:
    """
    Ordered, immutable collection of examples stored column-wise.

    Order is part of identity: splits and distilled targets refer to rows by index.
    """

    def __init__(self, schema: TaskSchema, features, targets, biases, provenance: Optional[Dict[str, Any]] = None):
        X = np.array(features, dtype=np.float64, copy=True)
        y = np.array(targets, dtype=np.int64, copy=True).reshape(-1)
        if X.size == 0:
            X = X.reshape(0, schema.feature_dim)
        if X.ndim != 2 or X.shape[1] != schema.feature_dim:
            raise SchemaError(f"Features have shape {X.shape}, expected (n, {schema.feature_dim})")
        if X.shape[0] != y.shape[0]:
            raise SchemaError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
        try:
            B = np.array(biases, dtype=np.int64, copy=True).reshape(y.shape[0], len(schema.bias_attrs))
        except ValueError:
            raise SchemaError(f"Bias labels do not fit {y.shape[0]} rows x {len(schema.bias_attrs)} attributes")
        if not np.all(np.isfinite(X)):
            raise SchemaError("Features must be finite")
        if y.size and (y.min() < 0 or y.max() >= schema.num_classes):
            raise SchemaError(f"Target labels must lie in [0, {schema.num_classes})")
        for pos, (name, card) in enumerate(schema.bias_attrs):
            col = B[:, pos]
            if col.size and (col.min() < 0 or col.max() >= card):
                raise SchemaError(f"Labels of bias attribute '{name}' must lie in [0, {card})")
        for arr in (X, y, B):
            arr.setflags(write=False)
        self.schema = schema
        self.features = X
        self.targets = y
        self.biases = B
        self.provenance = dict(provenance or {})

    @classmethod
    def from_examples(cls, schema: TaskSchema, examples: Sequence[Example], provenance: Optional[Dict[str, Any]] = None) -> "Dataset":
        if not examples:
            return cls(schema, np.zeros((0, schema.feature_dim)), [], np.zeros((0, len(schema.bias_attrs))), provenance)
        for i, ex in enumerate(examples):
            if len(ex.features) != schema.feature_dim or len(ex.bias) != len(schema.bias_attrs):
                raise SchemaError(f"Example {i} does not match the schema")
        return cls(
            schema,
            np.vstack([np.asarray(ex.features, dtype=np.float64) for ex in examples]),
            [ex.target for ex in examples],
            [list(ex.bias) for ex in examples],
            provenance,
        )

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def __getitem__(self, i: int) -> Example:
        return Example(self.features[i], int(self.targets[i]), tuple(int(b) for b in self.biases[i]))

    def __iter__(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield self[i]

    @property
    def examples(self) -> List[Example]:
        return list(self)

    def bias_labels(self, attr: str) -> np.ndarray:
        return self.biases[:, self.schema.bias_position(attr)]

    def subset(self, indices: Sequence[int], **provenance: Any) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        meta = dict(self.provenance)
        meta.update(provenance)
        return Dataset(self.schema, self.features[idx], self.targets[idx], self.biases[idx], meta)

    def digest(self) -> str:
        """sha256 over schema and contents; provenance is excluded"""
        h = hashlib.sha256()
        h.update(json.dumps(self.schema.to_dict(), sort_keys=True).encode("utf-8"))
        for arr in (self.features, self.targets, self.biases):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def aligned_fraction(self, attr: str) -> float:
        """Share of examples whose bias value is the one correlated with their target."""
        card = self.schema.cardinality(attr)
        return float(np.mean(self.bias_labels(attr) == self.targets % card))


# --- Synthetic Generation ---
@dataclass
class SyntheticSpec:
    """
    Synthetic biased task.

    alpha is the minority/majority ratio: each bias label takes the value aligned
    with the target (y mod cardinality) with probability 1/(1+alpha).
    """

    variant: str = "binary_bias"
    n: int = 12000
    alpha: float = 0.05
    feature_dim: int = 16
    target_signal: float = 1.0
    bias_signal: float = 1.0
    noise_std: float = 0.3
    seed: int = 0
    num_classes: int = 2

    def schema(self) -> TaskSchema:
        if self.variant == "binary_bias":
            return TaskSchema(2, (("bias", 2),), self.feature_dim)
        if self.variant == "multiclass":
            return TaskSchema(self.num_classes, (("color", self.num_classes),), self.feature_dim)
        if self.variant == "two_bias":
            return TaskSchema(self.num_classes, (("background", 2), ("co_object", 2)), self.feature_dim)
        raise GenerationError(f"Unknown variant '{self.variant}'", known=list(VARIANTS))

    def validate(self) -> List[str]:
        errors = []
        if self.variant not in VARIANTS:
            return [f"variant must be one of {VARIANTS}, got '{self.variant}'"]
        if self.num_classes < 2:
            errors.append("num_classes must be >= 2")
            return errors
        if not 0 < self.alpha <= 1:
            errors.append(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.noise_std > 0:
            errors.append("noise_std must be positive")
        if not (math.isfinite(self.target_signal) and math.isfinite(self.bias_signal)):
            errors.append("signal strengths must be finite")
        schema = self.schema()
        cells = schema.num_classes * int(np.prod([c for _, c in schema.bias_attrs]))
        if self.n < 4 * cells:
            errors.append(f"n={self.n} cannot populate {cells} group cells (need n >= {4 * cells})")
        min_dim = schema.num_classes + sum(c for _, c in schema.bias_attrs)
        if self.feature_dim < min_dim:
            errors.append(f"feature_dim={self.feature_dim} is below the {min_dim} orthogonal prototype directions")
        return errors

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "SyntheticSpec":
        return cls(**{k: v for k, v in raw.items() if k in cls.__dataclass_fields__})


def _streams(seed: int) -> List[np.random.SeedSequence]:
    # children: prototypes, skewed sample, balanced sample
    return np.random.SeedSequence(seed).spawn(3)


def _prototypes(spec: SyntheticSpec, schema: TaskSchema, stream: np.random.SeedSequence):
    widths = [schema.num_classes] + [c for _, c in schema.bias_attrs]
    draws = np.random.default_rng(stream).standard_normal((spec.feature_dim, sum(widths)))
    q, _ = np.linalg.qr(draws)
    blocks = []
    start = 0
    for w in widths:
        blocks.append(q[:, start:start + w].T)
        start += w
    return blocks[0], blocks[1:]


def _assemble(spec: SyntheticSpec, schema: TaskSchema, y: np.ndarray, B: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    target_protos, bias_protos = _prototypes(spec, schema, _streams(spec.seed)[0])
    X = spec.target_signal * target_protos[y]
    for pos, protos in enumerate(bias_protos):
        X = X + spec.bias_signal * protos[B[:, pos]]
    return X + spec.noise_std * rng.standard_normal((y.shape[0], spec.feature_dim))


def _check_spec(spec: SyntheticSpec) -> TaskSchema:
    problems = spec.validate()
    if problems:
        raise GenerationError("Invalid synthetic spec: " + "; ".join(problems), problems=problems)
    return spec.schema()


def generate(spec: SyntheticSpec) -> Dataset:
    schema = _check_spec(spec)
    rng = np.random.default_rng(_streams(spec.seed)[1])
    n, k = spec.n, schema.num_classes
    y = rng.integers(0, k, size=n)
    p_aligned = 1.0 / (1.0 + spec.alpha)
    B = np.zeros((n, len(schema.bias_attrs)), dtype=np.int64)
    for pos, (_, card) in enumerate(schema.bias_attrs):
        aligned_value = y % card
        aligned = rng.random(n) < p_aligned
        # offsets in [1, card) land uniformly on the non-aligned values
        other = (aligned_value + rng.integers(1, card, size=n)) % card
        B[:, pos] = np.where(aligned, aligned_value, other)
    X = _assemble(spec, schema, y, B, rng)
    data = Dataset(schema, X, y, B, {"source": "synthetic", **spec.to_dict()})
    logger.info(f"✓ Generated {spec.variant} dataset: n={n}, alpha={spec.alpha}, seed={spec.seed}")
    return data


def generate_balanced(spec: SyntheticSpec, per_cell: int) -> Dataset:
    """Group-balanced evaluation set sharing the prototypes of generate(spec)."""
    if per_cell <= 0:
        raise GenerationError("per_cell must be positive")
    schema = _check_spec(spec)
    rng = np.random.default_rng(_streams(spec.seed)[2])
    ranges = [range(schema.num_classes)] + [range(c) for _, c in schema.bias_attrs]
    cells = np.array(list(product(*ranges)), dtype=np.int64)
    rows = np.repeat(cells, per_cell, axis=0)
    y, B = rows[:, 0], rows[:, 1:]
    X = _assemble(spec, schema, y, B, rng)
    meta = {"source": "synthetic_balanced", "per_cell": per_cell, **spec.to_dict()}
    return Dataset(schema, X, y, B, meta)


# --- Splits & Grouping ---
def split_calibration(dataset: Dataset, fraction: float = DEFAULT_CALIBRATION_FRACTION, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """
    Seeded disjoint split into (deploy_train, calibration).

    deploy_train holds floor(n * (1 - fraction)) rows; indices stay in original order on each side.
    """
    if not 0 < fraction < 1:
        raise SplitError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    n_deploy = int(math.floor(n * (1.0 - fraction) + 1e-9))
    if n_deploy == 0 or n_deploy == n:
        raise SplitError(f"Splitting {n} examples at fraction {fraction} leaves one side empty", n=n)
    perm = np.random.default_rng(seed).permutation(n)
    deploy_idx = np.sort(perm[:n_deploy])
    cal_idx = np.sort(perm[n_deploy:])
    common = {"split_seed": seed, "split_fraction": fraction, "parent_digest": dataset.digest()}
    deploy = dataset.subset(deploy_idx, split="deploy_train", **common)
    calibration = dataset.subset(cal_idx, split="calibration", **common)
    logger.info(f"✓ Split {n} examples into {len(deploy)} deploy-train / {len(calibration)} calibration")
    return deploy, calibration


def group_index(dataset: Dataset, bias_attr: str) -> Dict[Tuple[int, int], List[int]]:
    """(target, bias value) -> example indices; every cell present, empty ones included."""
    card = dataset.schema.cardinality(bias_attr)
    cells: Dict[Tuple[int, int], List[int]] = {
        (y, b): [] for y in range(dataset.schema.num_classes) for b in range(card)
    }
    for i, (y, b) in enumerate(zip(dataset.targets.tolist(), dataset.bias_labels(bias_attr).tolist())):
        cells[(y, b)].append(i)
    return cells


def balance_groups(dataset: Dataset, bias_attr: str, seed: int = 0) -> Dataset:
    cells = group_index(dataset, bias_attr)
    size = min(len(v) for v in cells.values())
    if size == 0:
        empty = [cell for cell, idx in cells.items() if not idx]
        raise DatasetError(f"Cannot balance: empty cells {empty}", empty=empty)
    rng = np.random.default_rng(seed)
    chosen = []
    for cell in sorted(cells):
        chosen.extend(rng.choice(cells[cell], size=size, replace=False).tolist())
    return dataset.subset(sorted(chosen), balanced_on=bias_attr, balance_seed=seed)


# --- CSV ---
def _feature_names(dataset: Dataset) -> List[str]:
    names = dataset.provenance.get("feature_names")
    if names and len(names) == dataset.schema.feature_dim:
        return list(names)
    return [f"f{i}" for i in range(dataset.schema.feature_dim)]


def save_csv(dataset: Dataset, path: str) -> None:
    """Write the dataset plus its <path>.meta.json sidecar; floats use repr so the round trip is exact."""
    header = _feature_names(dataset) + [TARGET_COLUMN] + [BIAS_PREFIX + n for n in dataset.schema.bias_names]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for x, y, b in zip(dataset.features.tolist(), dataset.targets.tolist(), dataset.biases.tolist()):
            writer.writerow([repr(v) for v in x] + [y] + b)
    sidecar = {
        "schema": dataset.schema.to_dict(),
        "seed": dataset.provenance.get("seed"),
        "alpha": dataset.provenance.get("alpha"),
        "variant": dataset.provenance.get("variant"),
        "digest": dataset.digest(),
        "provenance": dataset.provenance,
    }
    with open(path + SIDECAR_SUFFIX, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    logger.info(f"✓ Wrote {len(dataset)} rows to {path}")


def _read_sidecar(path: str) -> Dict[str, Any]:
    meta_path = path + SIDECAR_SUFFIX
    if not os.path.exists(meta_path):
        return {}
    try:
        with open(meta_path, encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"Unreadable metadata sidecar {meta_path}: {e}", path=meta_path)


def _parse_float(value: str, column: str, line: int, path: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise CsvFormatError(line, f"non-numeric value '{value}' in column '{column}'", path)
    if not math.isfinite(v):
        raise CsvFormatError(line, f"non-finite value '{value}' in column '{column}'", path)
    return v


def _parse_label(value: str, column: str, line: int, path: str) -> int:
    try:
        v = int(value)
    except ValueError:
        raise CsvFormatError(line, f"label '{value}' in column '{column}' is not an integer", path)
    if v < 0:
        raise CsvFormatError(line, f"label {v} in column '{column}' is negative", path)
    return v


def _undecodable_line(path: str) -> int:
    with open(path, "rb") as f:
        for line_num, raw in enumerate(f, start=1):
            try:
                raw.decode("utf-8")
            except UnicodeDecodeError:
                return line_num
    return 1


def _read_rows(path: str) -> Tuple[List[str], List[Tuple[int, List[str]]]]:
    try:
        f = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"Cannot open {path}: {e}", path=path)
    rows = []
    with f:
        reader = csv.reader(f)
        try:
            header = next(reader, None)
            if not header:
                raise CsvFormatError(1, "missing header row", path)
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise CsvFormatError(reader.line_num, f"expected {len(header)} fields, got {len(row)}", path)
                rows.append((reader.line_num, row))
        except UnicodeDecodeError:
            raise CsvFormatError(_undecodable_line(path), "not valid UTF-8 text", path)
    return [h.strip() for h in header], rows


def load_csv(path: str, num_classes: Optional[int] = None, cardinalities: Optional[Dict[str, int]] = None) -> Dataset:
    """
    Load a labeled CSV: feature columns (any name), one 'target' column and 'bias:<name>' columns.

    Cardinalities come from the overrides, then the sidecar schema, then max label + 1.

    Raises:
        SchemaError: target column missing or labels exceed declared cardinalities
        CsvFormatError: malformed row (1-based line number; first data row is line 2)
    """
    header, rows = _read_rows(path)
    if TARGET_COLUMN not in header:
        raise SchemaError(f"{path} has no '{TARGET_COLUMN}' column", path=path, header=header)
    target_pos = header.index(TARGET_COLUMN)
    bias_cols = [(i, h[len(BIAS_PREFIX):]) for i, h in enumerate(header) if h.startswith(BIAS_PREFIX)]
    feature_cols = [(i, h) for i, h in enumerate(header) if i != target_pos and not h.startswith(BIAS_PREFIX)]
    if not feature_cols:
        raise SchemaError(f"{path} has no feature columns", path=path)
    if not rows:
        raise DatasetError(f"{path} has no data rows", path=path)

    X = np.empty((len(rows), len(feature_cols)))
    y = np.empty(len(rows), dtype=np.int64)
    B = np.empty((len(rows), len(bias_cols)), dtype=np.int64)
    for r, (line, row) in enumerate(rows):
        for j, (i, name) in enumerate(feature_cols):
            X[r, j] = _parse_float(row[i], name, line, path)
        y[r] = _parse_label(row[target_pos], TARGET_COLUMN, line, path)
        for j, (i, name) in enumerate(bias_cols):
            B[r, j] = _parse_label(row[i], BIAS_PREFIX + name, line, path)

    sidecar = _read_sidecar(path)
    declared = TaskSchema.from_dict(sidecar["schema"]) if "schema" in sidecar else None
    declared_cards = dict(declared.bias_attrs) if declared else {}
    declared_cards.update(cardinalities or {})
    k = num_classes or (declared.num_classes if declared else max(2, int(y.max()) + 1))
    attrs = []
    for j, (_, name) in enumerate(bias_cols):
        card = declared_cards.get(name) or max(2, int(B[:, j].max()) + 1)
        attrs.append((name, int(card)))
    schema = TaskSchema(int(k), tuple(attrs), len(feature_cols))

    provenance = dict(sidecar.get("provenance") or {})
    provenance.update({"source_path": path, "feature_names": [h for _, h in feature_cols]})
    data = Dataset(schema, X, y, B, provenance)
    logger.info(f"✓ Loaded {len(data)} rows from {path} (k={k}, bias attrs={schema.bias_names})")
    return data


def load_features_csv(path: str) -> Tuple[List[str], np.ndarray]:
    """Feature-only CSV; 'target' and 'bias:' columns, when present, are ignored."""
    header, rows = _read_rows(path)
    cols = [(i, h) for i, h in enumerate(header) if h != TARGET_COLUMN and not h.startswith(BIAS_PREFIX)]
    if not cols:
        raise SchemaError(f"{path} has no feature columns", path=path)
    X = np.empty((len(rows), len(cols)))
    for r, (line, row) in enumerate(rows):
        for j, (i, name) in enumerate(cols):
            X[r, j] = _parse_float(row[i], name, line, path)
    return [h for _, h in cols], X
