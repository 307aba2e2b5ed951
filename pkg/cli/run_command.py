"""
run subcommand
Expands the config into (seed x method) cells and runs them on the worker pool
"""

import logging
import os

from tqdm import tqdm

from cli.data_command import ensure_backbones, ensure_dataset
from core.errors import ConfigurationError
from core.experiment_manager import ExperimentManager, ExperimentResources
from core.report import CSV_FIELDS, merge_rows, summarize
from utils.file_utils import FileUtils
from utils.validators import InputValidator

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.json"
CONFIG_ECHO = "config.resolved.json"


def register(sub, parent):
    run = sub.add_parser("run", parents=[parent], help="run every configured (seed x method) cell")
    run.add_argument("--workers", type=int, default=None, help="concurrent cells (default: config 'workers')")
    run.add_argument("--data", default=None, help="dataset directory (default: <out>/data)")
    run.add_argument("--weights", default=None, help="pretrained backbone directory (default: <out>/weights)")
    run.set_defaults(handler=cmd_run)


def _workers(args, config):
    if args.workers is None:
        return config.get("workers")
    ok, value = InputValidator().validate_positive_integer(args.workers)
    if not ok:
        raise ConfigurationError(f"--workers {value}")
    return value


def cmd_run(args):
    from cli.app import EXIT_OK, EXIT_RUN_FAILURE, data_dir, load_config, prepare_out, weights_dir

    config = load_config(args)
    out = prepare_out(args.out)
    seeds = [args.seed] if args.seed is not None else None
    cells = config.cells(seeds)
    workers = _workers(args, config)
    config.export_config(os.path.join(out, CONFIG_ECHO))

    dataset = ensure_dataset(config, args.data or data_dir(config, args), config.get("auto_generate"))
    student_bb, teacher_bb, checksums = ensure_backbones(
        config, dataset, args.weights or weights_dir(config, args), config.get("auto_generate"), args.progress
    )
    runs_dir = prepare_out(os.path.join(out, "runs"))
    resources = ExperimentResources(dataset, student_bb, teacher_bb, checksums)
    manager = ExperimentManager(resources, runs_dir, max_concurrent=workers)
    for cell in cells:
        manager.add_cell(cell)
    logger.info("Running %d cells on %d worker(s)", len(cells), workers)

    bar = tqdm(total=len(cells), desc="cells", unit="cell", disable=not args.progress)

    def on_progress(run_id, data):
        if data["status"] == "Completed":
            logger.info("%s done: ACC %.2f (%s)", run_id, data["acc"], FileUtils().format_duration(data["duration"]))
            bar.update(1)
        elif data["status"] == "Failed":
            bar.update(1)

    try:
        results = manager.run_all(progress_callback=on_progress)
    except KeyboardInterrupt:
        logger.warning("Interrupted, letting running cells finish")
        manager.cancel_all()
        raise
    finally:
        bar.close()

    utils = FileUtils()
    rows = merge_rows(rows for rows, _ in results)
    utils.write_csv(os.path.join(out, RESULTS_FILE), CSV_FIELDS, [row.to_csv() for row in rows])
    if rows:
        summaries = summarize(rows)
        utils.write_json(os.path.join(out, SUMMARY_FILE), {
            "summaries": [s.to_dict() for s in summaries],
            "runs": [summary["run_id"] for _, summary in results],
            "failed": [run_id for run_id, _ in manager.failed_cells],
            "weights": checksums,
        })

    status = manager.get_queue_status()
    logger.info("Completed %d, failed %d", status["completed"], status["failed"])
    if manager.failed_cells:
        for run_id, error in manager.failed_cells:
            logger.error("Run %s failed: %s", run_id, error)
        return EXIT_RUN_FAILURE
    return EXIT_OK
