#!/usr/bin/env python3
"""
Tests for the gradient-check suite, the experiment manager and the
command-line entry points
"""

import json
import os

import numpy as np

from cli.app import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUN_FAILURE, run_cli
from cli.gradcheck_command import report_suite, select_checks, suite_document
from conftest import TINY_CONFIG_DOC
from core import autodiff as ad
from core.autodiff import Tensor
from core.config_manager import parse_config
from core.distillation import METHODS
from core.experiment_manager import ExperimentManager, ExperimentResources
from core.gradcheck_suite import LOSSES, GradCheck, registered_checks, run_gradcheck_suite
from utils.file_utils import FileUtils, load_weights
from utils.validators import FileValidator


def _bad_square_check():
    """x^2 whose backward forgets the factor 2"""

    def build(seed):
        params = {"x": Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)}

        def loss(p):
            x = p["x"]
            return ad._apply("bad_square", x.data ** 2, (x,), lambda g: (g * x.data,)).sum()

        return loss, params, None

    return GradCheck("bad_square", "primitive", 1e-5, build)


# ---------------------------------------------------------------- gradient suite

def test_corrupted_gradient_is_reported_by_name(tmp_path, capsys):
    entries = run_gradcheck_suite([_bad_square_check()] + select_checks(["add"]))
    assert [e.passed for e in entries] == [False, True]
    failed = report_suite(entries, str(tmp_path))
    assert failed == ["bad_square"]
    assert "bad_square" in capsys.readouterr().out
    document = FileUtils().read_json(str(tmp_path / "gradcheck.json"))
    assert document["passed"] is False
    assert document["checks"][0]["max_relative_error"] > 0.1


def test_builder_errors_become_failed_entries():
    def broken(seed):
        raise ValueError("no params")

    (entry,) = run_gradcheck_suite([GradCheck("broken", "loss", 1e-4, broken)])
    assert not entry.passed
    assert "ValueError" in entry.error
    assert suite_document([entry])["checks"][0]["max_relative_error"] is None


def test_every_loss_check_passes():
    entries = run_gradcheck_suite(LOSSES)
    assert all(e.passed for e in entries), [(e.name, e.result, e.error) for e in entries if not e.passed]


def test_check_registry():
    names = [c.name for c in registered_checks()]
    assert len(names) == len(set(names))
    assert {"softmax_with_temperature", "kl_divergence", "dkd_loss", "student_loss/coda-kdp"} <= set(names)
    composites = [c.name for c in select_checks(["student_loss/"])]
    assert {name.rsplit("-", 1)[1] for name in composites} == set(METHODS)
    assert {name.split("/")[1].split("-")[0] for name in composites} == {"l2p", "dualprompt", "coda"}
    assert "student_loss/dualprompt-kdp" in composites


# ---------------------------------------------------------------- experiment manager

def test_manager_records_failures_and_keeps_order(tiny_dataset, tiny_backbones):
    cells = parse_config(TINY_CONFIG_DOC).cells([0, 1])
    resources = ExperimentResources(tiny_dataset, *tiny_backbones)

    def runner(cell, resources, output_dir):
        if cell.seed == 1:
            raise RuntimeError("boom")
        return [], {"run_id": cell.run_id, "student": {"avg_accuracy": 50.0}}

    manager = ExperimentManager(resources, max_concurrent=3, runner=runner)
    for cell in cells:
        manager.add_cell(cell)
    events = []
    results = manager.run_all(progress_callback=lambda run_id, data: events.append((run_id, data["status"])))
    assert [summary["run_id"] for _, summary in results] == [c.run_id for c in cells if c.seed == 0]
    assert sorted(run_id for run_id, _ in manager.failed_cells) == sorted(c.run_id for c in cells if c.seed == 1)
    status = manager.get_queue_status()
    assert (status["completed"], status["failed"], status["queued"]) == (2, 2, 0)
    assert sum(1 for _, s in events if s == "Running") == 4


def test_cancel_stops_taking_new_cells(tiny_dataset, tiny_backbones):
    cells = parse_config(TINY_CONFIG_DOC).cells([0, 1])
    resources = ExperimentResources(tiny_dataset, *tiny_backbones)

    def runner(cell, resources, output_dir):
        manager.cancel_all()
        return [], {"run_id": cell.run_id, "student": {"avg_accuracy": 50.0}}

    manager = ExperimentManager(resources, max_concurrent=1, runner=runner)
    for cell in cells:
        manager.add_cell(cell)
    results = manager.run_all()
    assert [summary["run_id"] for _, summary in results] == [cells[0].run_id]
    status = manager.get_queue_status()
    assert (status["completed"], status["queued"], status["is_running"]) == (1, len(cells) - 1, False)


def test_streams_are_shared(tiny_dataset, tiny_backbones):
    resources = ExperimentResources(tiny_dataset, *tiny_backbones)
    assert resources.stream(2, 0) is resources.stream(2, 0)


# ---------------------------------------------------------------- command line

def _cli(tmp_path, *argv, config=None):
    document = TINY_CONFIG_DOC if config is None else config
    return run_cli([*argv, "--out", str(tmp_path), "--config", json.dumps(document), "--quiet"])


def test_bad_config_key_exits_2(tmp_path):
    assert _cli(tmp_path, "run", config={"distill": {"alhpa": 0.3}}) == EXIT_CONFIG_ERROR


def test_bad_worker_count_exits_2(tmp_path):
    assert _cli(tmp_path, "run", "--workers", "0") == EXIT_CONFIG_ERROR


def test_output_path_that_is_a_file_exits_2(tmp_path):
    blocker = tmp_path / "not-a-dir"
    blocker.write_text("x")
    argv = ["gen-data", "--out", str(blocker), "--config", json.dumps(TINY_CONFIG_DOC), "--quiet"]
    assert run_cli(argv) == EXIT_CONFIG_ERROR
    assert run_cli(["gen-data", "--out", str(blocker / "nested"), "--config", json.dumps(TINY_CONFIG_DOC),
                    "--quiet"]) == EXIT_CONFIG_ERROR


def test_writable_directory_validation(tmp_path):
    validator = FileValidator()
    assert validator.is_writable_directory(str(tmp_path)) == (True, str(tmp_path))
    deep = str(tmp_path / "a" / "b" / "c")
    assert validator.is_writable_directory(deep) == (True, deep)
    assert not validator.is_writable_directory("")[0]
    (tmp_path / "file").write_text("x")
    assert not validator.is_writable_directory(str(tmp_path / "file"))[0]


def test_missing_inputs_exit_1(tmp_path):
    document = dict(TINY_CONFIG_DOC, auto_generate=False)
    assert _cli(tmp_path, "run", config=document) == EXIT_RUN_FAILURE
    assert _cli(tmp_path, "pretrain", config=document) == EXIT_RUN_FAILURE


def test_report_without_results(tmp_path):
    assert _cli(tmp_path, "report") == EXIT_RUN_FAILURE
    assert _cli(tmp_path, "report", "--results", str(tmp_path)) == EXIT_RUN_FAILURE


def test_gradcheck_command(tmp_path):
    assert _cli(tmp_path, "grad-check", "--only", "add", "--only", "kd_loss") == EXIT_OK
    document = FileUtils().read_json(str(tmp_path / "gradcheck.json"))
    assert [c["name"] for c in document["checks"]] == ["add", "kd_loss"]
    assert _cli(tmp_path, "grad-check", "--only", "nothing-like-this") == EXIT_CONFIG_ERROR


def test_full_pipeline(tmp_path, capsys):
    assert _cli(tmp_path, "gen-data", "--preview") == EXIT_OK
    data = tmp_path / "data"
    assert {"train.cdld", "test.cdld", "dataset.json", "preview.png"} <= set(os.listdir(data))

    assert _cli(tmp_path, "pretrain") == EXIT_OK
    weights = tmp_path / "weights"
    assert {"student.cdlw", "teacher.cdlw", "pretrain.json"} <= set(os.listdir(weights))

    assert _cli(tmp_path, "run") == EXIT_OK
    utils = FileUtils()
    rows = utils.read_csv(str(tmp_path / "results.csv"))
    run_ids = {r["run_id"] for r in rows}
    assert run_ids == {"coda-none-base-s0", "coda-kdp-base-s0", "coda-teacher-s0"}
    # two tasks -> three lower-triangular cells per run
    assert len(rows) == 9
    summary = utils.read_json(str(tmp_path / "summary.json"))
    assert summary["failed"] == []
    assert set(summary["weights"]) == {"student", "teacher"}
    assert parse_config(str(tmp_path / "config.resolved.json")) == parse_config(TINY_CONFIG_DOC)
    run_doc = utils.read_json(str(tmp_path / "runs" / "coda-kdp-base-s0.json"))
    assert run_doc["rehearsal_violations"] == 0
    for role in ("student", "teacher"):
        path = tmp_path / "runs" / f"coda-kdp-base-s0.{role}.cdlw"
        assert utils.calculate_file_hash(str(path)) == run_doc["checksums"]["learners"][role]
        assert any(name.startswith("pool/") for name in load_weights(str(path)))

    capsys.readouterr()
    assert _cli(tmp_path, "report") == EXIT_OK
    assert "coda-kdp" in capsys.readouterr().out
    for name in ("report.txt", "report_summary.csv", "report.json"):
        assert (tmp_path / name).exists()


def test_run_generates_missing_inputs(tmp_path):
    assert _cli(tmp_path, "run", "--seed", "3") == EXIT_OK
    assert (tmp_path / "data" / "train.cdld").exists()
    assert (tmp_path / "weights" / "student.cdlw").exists()
    rows = FileUtils().read_csv(str(tmp_path / "results.csv"))
    assert {r["seed"] for r in rows} == {"3"}


def test_stale_weights_are_a_config_error(tmp_path):
    assert _cli(tmp_path, "pretrain") == EXIT_OK
    wider = dict(TINY_CONFIG_DOC, student=dict(TINY_CONFIG_DOC["student"], embed_dim=16))
    assert _cli(tmp_path, "run", config=wider) == EXIT_CONFIG_ERROR
