"""
Experiment Manager for continual distillation runs
Queues (seed x method) cells and runs them on a bounded pool of worker threads
"""

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from queue import Empty, Queue

from core.dataset import make_task_stream
from core.harness import build_learners, cdl_run
from core.report import CSV_FIELDS, rows_from_result
from utils.file_utils import FileUtils, save_weights

logger = logging.getLogger(__name__)


@dataclass
class ExperimentResources:
    """Read-only inputs shared by every cell"""

    dataset: object
    student_backbone: object
    teacher_backbone: object
    weight_checksums: dict = field(default_factory=dict)
    _streams: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def stream(self, tasks, seed):
        with self._lock:
            key = (tasks, seed)
            if key not in self._streams:
                self._streams[key] = make_task_stream(self.dataset, tasks, seed)
            return self._streams[key]


def execute_cell(cell, resources, output_dir=None):
    """Run one cell end to end; returns (rows, summary document)"""
    config = cell.run_config
    stream = resources.stream(config.tasks, cell.seed)
    teacher, student = build_learners(config, resources.student_backbone, resources.teacher_backbone)
    result = cdl_run(teacher, student, stream, config)
    rows = rows_from_result(cell, result)
    summary = {
        "run_id": cell.run_id,
        "seed": cell.seed,
        "pool": cell.pool,
        "distill": cell.distill,
        "variant": cell.variant,
        "student": result.student_report.to_dict(),
        "teacher": result.teacher_report.to_dict(),
        "student_matrix": result.student_matrix.to_list(),
        "teacher_matrix": result.teacher_matrix.to_list(),
        "checksums": dict(result.checksums, weights=dict(resources.weight_checksums)),
        "rehearsal_reads": {str(k): v for k, v in result.audit.reads.items()},
        "rehearsal_violations": result.audit.violations,
    }
    if output_dir:
        utils = FileUtils()
        summary["checksums"]["learners"] = {
            role: save_weights(os.path.join(output_dir, f"{cell.run_id}.{role}.cdlw"), learner.arrays())
            for role, learner in (("student", student), ("teacher", teacher))
        }
        utils.write_csv(os.path.join(output_dir, f"{cell.run_id}.csv"), CSV_FIELDS, [r.to_csv() for r in rows])
        utils.write_json(os.path.join(output_dir, f"{cell.run_id}.json"), summary)
    return rows, summary


class ExperimentManager:
    def __init__(self, resources, output_dir=None, max_concurrent=1, runner=execute_cell):
        self.resources = resources
        self.output_dir = output_dir
        self.runner = runner

        self.cell_queue = Queue()
        self.active_cells = {}
        self.completed_cells = []
        self.failed_cells = []
        self.results = {}
        self.order = []

        self.is_running = False
        self.max_concurrent = max(1, int(max_concurrent))
        self.worker_threads = []
        self.progress_callback = None
        self._lock = threading.Lock()

    def add_cell(self, cell):
        """Add a cell to the queue"""
        self.order.append(cell.run_id)
        self.cell_queue.put(cell)

    def run_all(self, progress_callback=None):
        """Process the queue to exhaustion; results come back in submission order"""
        self.progress_callback = progress_callback
        self.is_running = True
        self.worker_threads = []
        for _ in range(min(self.max_concurrent, max(self.cell_queue.qsize(), 1))):
            thread = threading.Thread(target=self._worker, daemon=True)
            thread.start()
            self.worker_threads.append(thread)
        for thread in self.worker_threads:
            thread.join()
        self.is_running = False
        return [self.results[run_id] for run_id in self.order if run_id in self.results]

    def cancel_all(self):
        """Stop taking new cells; running cells finish"""
        self.is_running = False

    def _worker(self):
        while self.is_running:
            try:
                cell = self.cell_queue.get_nowait()
            except Empty:
                return
            self._process_cell(cell)

    def _process_cell(self, cell):
        run_id = cell.run_id
        with self._lock:
            self.active_cells[run_id] = cell
        self._update_progress(run_id, {'status': 'Running'})
        started = time.time()
        try:
            rows, summary = self.runner(cell, self.resources, self.output_dir)
            with self._lock:
                self.results[run_id] = (rows, summary)
                self.completed_cells.append(run_id)
            self._update_progress(run_id, {
                'status': 'Completed',
                'duration': time.time() - started,
                'acc': summary['student']['avg_accuracy'],
            })
        except Exception as e:
            logger.error("Run %s failed: %s", run_id, e, exc_info=True)
            with self._lock:
                self.failed_cells.append((run_id, e))
            self._update_progress(run_id, {'status': 'Failed', 'error': str(e)})
        finally:
            with self._lock:
                self.active_cells.pop(run_id, None)

    def _update_progress(self, run_id, progress_data):
        """Update progress and call callback"""
        if self.progress_callback:
            try:
                self.progress_callback(run_id, progress_data)
            except Exception as e:
                logger.warning("Progress callback error: %s", e)

    def get_queue_status(self):
        """Get current queue status"""
        with self._lock:
            return {
                'queued': self.cell_queue.qsize(),
                'active': len(self.active_cells),
                'completed': len(self.completed_cells),
                'failed': len(self.failed_cells),
                'is_running': self.is_running,
            }
