"""Accuracy matrix and the continual-learning summary metrics.

Tasks are numbered from 1. ``a[i, j]`` is the accuracy on task i after training
task j and is defined only for i <= j.
"""
import logging
import math

import numpy as np

from errors import MetricError
from utils import atomic_write_json, write_csv

logger = logging.getLogger(__name__)


class AccuracyMatrix:
    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise MetricError(f"accuracy matrix needs at least one task, got {num_tasks}")
        self.num_tasks = num_tasks
        self.values = np.full((num_tasks, num_tasks), np.nan)

    def _check_index(self, i, j):
        if not 1 <= i <= j <= self.num_tasks:
            raise MetricError(f"a[{i}, {j}] is outside 1 <= i <= j <= {self.num_tasks}")

    def record(self, i: int, j: int, accuracy: float):
        self._check_index(i, j)
        if not 0.0 <= accuracy <= 1.0:
            raise MetricError(f"accuracy must lie in [0, 1], got {accuracy}")
        self.values[i - 1, j - 1] = accuracy

    def get(self, i: int, j: int) -> float:
        self._check_index(i, j)
        value = self.values[i - 1, j - 1]
        if math.isnan(value):
            raise MetricError(f"a[{i}, {j}] has not been recorded")
        return float(value)

    def column_complete(self, j: int) -> bool:
        return not np.isnan(self.values[:j, j - 1]).any()

    def to_rows(self) -> list[tuple[int, int, float]]:
        return [(i, j, float(self.values[i - 1, j - 1]))
                for j in range(1, self.num_tasks + 1)
                for i in range(1, j + 1)
                if not math.isnan(self.values[i - 1, j - 1])]

    @classmethod
    def from_rows(cls, num_tasks, rows) -> "AccuracyMatrix":
        matrix = cls(num_tasks)
        for i, j, accuracy in rows:
            matrix.record(int(i), int(j), float(accuracy))
        return matrix

    def __eq__(self, other):
        return (isinstance(other, AccuracyMatrix)
                and np.array_equal(self.values, other.values, equal_nan=True))


def acc(matrix: AccuracyMatrix) -> float:
    """Mean final accuracy over all tasks."""
    last = matrix.num_tasks
    if not matrix.column_complete(last):
        raise MetricError("ACC needs every task evaluated after the last task")
    return float(np.mean([matrix.get(i, last) for i in range(1, last + 1)]))


def fgt(matrix: AccuracyMatrix) -> float:
    """Mean over earlier tasks of the largest drop from any accuracy to the final one.

    Undefined for a single task; that case returns 0.0 (see ``fgt_defined``).
    """
    last = matrix.num_tasks
    if last == 1:
        logger.warning("forgetting is undefined for a single task; reporting 0")
        return 0.0
    drops = []
    for i in range(1, last):
        final = matrix.get(i, last)
        drops.append(max(matrix.get(i, j) - final for j in range(i, last + 1)))
    return float(sum(drops) / (last - 1))


def fgt_defined(matrix: AccuracyMatrix) -> bool:
    return matrix.num_tasks >= 2


def average_accuracy_curve(matrix: AccuracyMatrix) -> list[float]:
    """Mean accuracy over the tasks learned so far, after each task."""
    return [float(np.mean([matrix.get(i, j) for i in range(1, j + 1)]))
            for j in range(1, matrix.num_tasks + 1)
            if matrix.column_complete(j)]


def summarize(matrix: AccuracyMatrix) -> dict:
    return {
        "acc": acc(matrix),
        "fgt": fgt(matrix),
        "fgt_defined": fgt_defined(matrix),
        "num_tasks": matrix.num_tasks,
        "average_accuracy_curve": average_accuracy_curve(matrix),
    }


def write_acc_matrix_csv(matrix: AccuracyMatrix, path):
    rows = [[i, j, repr(value)] for i, j, value in matrix.to_rows()]
    write_csv(path, ["i", "j", "accuracy"], rows)


def write_metrics_json(path, summary: dict, **extra):
    atomic_write_json(path, {**summary, **extra})


# (metric, relation, lhs cell, rhs cell); a cell is (schedule, norm mode)
ABLATION_ORDERINGS = (
    ("acc", ">=", ("hierarchical", "xconv_bn"), ("hierarchical", "shared_bn")),
    ("acc", ">=", ("hierarchical", "xconv_bn"), ("plain_ft", "xconv_bn")),
    ("acc", ">=", ("plain_ft", "xconv_bn"), ("plain_ft", "shared_bn")),
    ("fgt", "<=", ("hierarchical", "xconv_bn"), ("hierarchical", "shared_bn")),
    ("fgt", "<=", ("hierarchical", "xconv_bn"), ("plain_ft", "xconv_bn")),
    ("fgt", "<=", ("plain_ft", "xconv_bn"), ("plain_ft", "shared_bn")),
    ("median_delta1", "<=", ("hierarchical", "xconv_bn"), ("plain_ft", "xconv_bn")),
    ("median_delta2_minus_delta0", "<=", ("hierarchical", "xconv_bn"),
     ("hierarchical", "task_bn")),
)
ORDERINGS_HEADER = ["metric", "relation", "lhs", "rhs", "lhs_value", "rhs_value", "holds"]


def _seed_mean(cells, schedule, norm_mode, metric):
    values = [summary[metric] for (cell_schedule, cell_norm, _), summary in cells.items()
              if cell_schedule == schedule and cell_norm == norm_mode
              and summary.get(metric) is not None]
    return float(np.mean(values)) if values else None


def ablation_orderings(cells: dict) -> list[dict]:
    """Check the directional ablation claims on seed means of grid cells.

    ``cells`` maps (schedule, norm mode, seed) to a cell summary. An ordering
    whose cells did not run has ``holds`` None; ties count as holding.
    """
    results = []
    for metric, relation, lhs, rhs in ABLATION_ORDERINGS:
        lhs_value = _seed_mean(cells, *lhs, metric)
        rhs_value = _seed_mean(cells, *rhs, metric)
        holds = None
        if lhs_value is not None and rhs_value is not None:
            holds = lhs_value >= rhs_value if relation == ">=" else lhs_value <= rhs_value
            if not holds:
                logger.warning("ablation ordering fails: %s %s %s %s (%.4f vs %.4f)", metric,
                               "+".join(lhs), relation, "+".join(rhs), lhs_value, rhs_value)
        results.append({"metric": metric, "relation": relation, "lhs": "+".join(lhs),
                        "rhs": "+".join(rhs), "lhs_value": lhs_value, "rhs_value": rhs_value,
                        "holds": holds})
    return results


def write_orderings_csv(orderings: list[dict], path):
    rows = [["" if ordering[name] is None else ordering[name] for name in ORDERINGS_HEADER]
            for ordering in orderings]
    write_csv(path, ORDERINGS_HEADER, rows)
