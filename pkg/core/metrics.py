"""
Continual-learning metrics
Result matrices, average accuracy, forgetting, backward transfer and
seed summaries
"""

from dataclasses import dataclass, field

import numpy as np

from core.errors import ContractViolation, UndefinedMetricError


class ResultMatrix:
    """R[i][j]: accuracy (percent) on task j after training task i, j <= i"""

    def __init__(self, num_tasks):
        if num_tasks < 1:
            raise ContractViolation("a result matrix needs at least one task")
        self.num_tasks = num_tasks
        self.values = np.full((num_tasks, num_tasks), np.nan)

    def record(self, trained, evaluated, accuracy):
        if not 0 <= evaluated <= trained < self.num_tasks:
            raise ContractViolation(f"R[{trained}][{evaluated}] is outside the lower triangle of a {self.num_tasks}-task matrix")
        if not 0.0 <= accuracy <= 100.0:
            raise ContractViolation(f"accuracy {accuracy} outside [0, 100]")
        self.values[trained, evaluated] = float(accuracy)

    def record_row(self, trained, accuracies):
        for evaluated, acc in enumerate(accuracies):
            self.record(trained, evaluated, acc)

    def __getitem__(self, index):
        return self.values[index]

    def row(self, trained):
        return self.values[trained, : trained + 1]

    def rows_complete(self):
        """Number of leading rows whose lower-triangular cells are all filled"""
        for i in range(self.num_tasks):
            if np.isnan(self.row(i)).any():
                return i
        return self.num_tasks

    def is_complete(self):
        return self.rows_complete() == self.num_tasks

    def to_list(self):
        return [[float(v) for v in self.row(i)] for i in range(self.rows_complete())]

    @classmethod
    def from_list(cls, rows, num_tasks=None):
        matrix = cls(num_tasks or len(rows))
        for i, row in enumerate(rows):
            matrix.record_row(i, row)
        return matrix

    def __eq__(self, other):
        return isinstance(other, ResultMatrix) and np.array_equal(self.values, other.values, equal_nan=True)


def _require_complete(matrix):
    if not matrix.is_complete():
        raise ContractViolation(f"result matrix complete through task {matrix.rows_complete()} of {matrix.num_tasks}")


def avg_accuracy(matrix):
    """Mean of the final row"""
    _require_complete(matrix)
    return float(matrix.row(matrix.num_tasks - 1).mean())


def forgetting(matrix):
    """Mean drop R[i][i] - R[T][i] over every task but the last (positive = degradation)"""
    _require_complete(matrix)
    last = matrix.num_tasks - 1
    if last < 1:
        raise UndefinedMetricError("forgetting needs at least two tasks")
    return float(np.mean([matrix[i, i] - matrix[last, i] for i in range(last)]))


def backward_transfer(matrix):
    """Mean R[T][i] - R[i][i]; the negated forgetting"""
    return -forgetting(matrix)


def accuracy_curve(matrix):
    """Average accuracy over the seen tasks after each training stage"""
    return [float(matrix.row(i).mean()) for i in range(matrix.rows_complete())]


@dataclass
class MetricsReport:
    avg_accuracy: float
    forgetting: float
    forgetting_defined: bool
    backward_transfer: float
    final_accuracies: list
    curve: list
    wall_clock: float = 0.0
    seed: int = 0
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, matrix, seed=0, wall_clock=0.0):
        defined = matrix.num_tasks >= 2
        forget = forgetting(matrix) if defined else 0.0
        return cls(
            avg_accuracy=avg_accuracy(matrix),
            forgetting=forget,
            forgetting_defined=defined,
            backward_transfer=-forget,
            final_accuracies=[float(v) for v in matrix.row(matrix.num_tasks - 1)],
            curve=accuracy_curve(matrix),
            wall_clock=float(wall_clock),
            seed=seed,
        )

    def to_dict(self):
        return {
            "avg_accuracy": self.avg_accuracy,
            "forgetting": self.forgetting,
            "forgetting_defined": self.forgetting_defined,
            "backward_transfer": self.backward_transfer,
            "final_accuracies": list(self.final_accuracies),
            "curve": list(self.curve),
            "wall_clock": self.wall_clock,
            "seed": self.seed,
            **self.extras,
        }


def mean_std(values):
    """Mean and population standard deviation"""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ContractViolation("mean_std of no values")
    return float(values.mean()), float(values.std(ddof=0))
