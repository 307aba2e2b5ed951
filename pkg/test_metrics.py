#!/usr/bin/env python3
"""
Tests for result matrices, accuracy, forgetting and seed summaries
"""

import numpy as np
import pytest

from conftest import lower_triangular
from core.errors import ContractViolation, UndefinedMetricError
from core.metrics import (
    MetricsReport,
    ResultMatrix,
    accuracy_curve,
    avg_accuracy,
    backward_transfer,
    forgetting,
    mean_std,
)
from core.rng import SeededRng


def test_worked_examples():
    matrix = ResultMatrix.from_list([[90.0], [80.0, 85.0]])
    assert avg_accuracy(matrix) == pytest.approx(82.5)
    assert forgetting(matrix) == pytest.approx(10.0)
    assert backward_transfer(matrix) == pytest.approx(-10.0)
    assert accuracy_curve(matrix) == pytest.approx([90.0, 82.5])


def test_no_forgetting_when_diagonal_holds():
    matrix = ResultMatrix.from_list([[70.0], [70.0, 60.0], [70.0, 60.0, 50.0]])
    assert forgetting(matrix) == 0.0
    assert avg_accuracy(matrix) == pytest.approx(60.0)


def test_random_matrices_match_brute_force():
    for draw in range(100):
        rng = SeededRng(draw, "metrics/oracle")
        tasks = int(rng.integers(2, 7))
        rows = lower_triangular(rng, tasks)
        matrix = ResultMatrix.from_list(rows)
        last = rows[-1]
        assert avg_accuracy(matrix) == pytest.approx(sum(last) / tasks, abs=1e-9)
        drops = [rows[i][i] - last[i] for i in range(tasks - 1)]
        assert forgetting(matrix) == pytest.approx(sum(drops) / len(drops), abs=1e-9)


def test_single_task_forgetting_undefined():
    matrix = ResultMatrix.from_list([[55.0]])
    assert avg_accuracy(matrix) == 55.0
    with pytest.raises(UndefinedMetricError):
        forgetting(matrix)
    report = MetricsReport.from_matrix(matrix)
    assert report.forgetting_defined is False
    assert report.to_dict()["forgetting_defined"] is False


def test_matrix_bounds():
    matrix = ResultMatrix(2)
    with pytest.raises(ContractViolation):
        matrix.record(0, 1, 50.0)
    with pytest.raises(ContractViolation):
        matrix.record(1, 0, 101.0)
    with pytest.raises(ContractViolation):
        ResultMatrix(0)


def test_incomplete_matrix_rejected():
    matrix = ResultMatrix(2)
    matrix.record_row(0, [50.0])
    assert matrix.rows_complete() == 1
    assert matrix.to_list() == [[50.0]]
    with pytest.raises(ContractViolation):
        avg_accuracy(matrix)


def test_matrix_equality_and_round_trip():
    rows = [[10.0], [20.0, 30.0]]
    assert ResultMatrix.from_list(rows) == ResultMatrix.from_list(ResultMatrix.from_list(rows).to_list())
    assert ResultMatrix.from_list(rows) != ResultMatrix.from_list([[10.0], [20.0, 31.0]])


def test_report_fields():
    report = MetricsReport.from_matrix(ResultMatrix.from_list([[90.0], [80.0, 85.0]]), seed=3, wall_clock=1.5)
    doc = report.to_dict()
    assert doc["avg_accuracy"] == pytest.approx(82.5)
    assert doc["forgetting"] == pytest.approx(10.0)
    assert doc["final_accuracies"] == [80.0, 85.0]
    assert doc["seed"] == 3 and doc["wall_clock"] == 1.5


def test_mean_std_is_population():
    assert mean_std([70.0, 72.0]) == (71.0, 1.0)
    assert mean_std([64.0]) == (64.0, 0.0)
    values = [1.0, 4.0, 9.0]
    assert mean_std(values)[1] == pytest.approx(np.std(values))
    with pytest.raises(ContractViolation):
        mean_std([])
