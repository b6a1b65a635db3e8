"""
Test doubles and dataset builders shared across test modules
"""

from typing import Dict, List, Sequence

import numpy as np

from dataset import Dataset, TaskSchema
from oracle_client import OracleHandle
from prob_core import ProbVector


class TableOracle(OracleHandle):
    """Scripted oracle: the first feature of each row is a key into a fixed table of outputs."""

    def __init__(self, table: Dict[int, Sequence[float]], k: int = 2):
        super().__init__(k)
        self.table = {key: ProbVector(np.asarray(v, dtype=np.float64)) for key, v in table.items()}
        self.calls = 0

    @property
    def oracle_id(self) -> str:
        return "table"

    def query_batch(self, features) -> List[ProbVector]:
        self.calls += 1
        return [self.table[int(round(row[0]))] for row in np.asarray(features, dtype=np.float64)]


class ConstantOracle(OracleHandle):
    def __init__(self, probs: Sequence[float]):
        super().__init__(len(probs))
        self.probs = ProbVector(np.asarray(probs, dtype=np.float64))

    @property
    def oracle_id(self) -> str:
        return "constant"

    def query_batch(self, features) -> List[ProbVector]:
        return [self.probs for _ in range(len(np.atleast_2d(features)))]


def make_dataset(targets, biases, features=None, num_classes=2, cardinality=2, name="bias") -> Dataset:
    targets = np.asarray(targets)
    biases = np.asarray(biases).reshape(len(targets), -1)
    if features is None:
        features = np.column_stack([np.arange(len(targets), dtype=np.float64), np.zeros(len(targets))])
    features = np.asarray(features, dtype=np.float64)
    names = [name] if biases.shape[1] == 1 else [f"{name}{i}" for i in range(biases.shape[1])]
    schema = TaskSchema(num_classes, tuple((n, cardinality) for n in names), features.shape[1])
    return Dataset(schema, features, targets, biases)


