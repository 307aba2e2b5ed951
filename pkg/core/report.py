"""
Result rows and summary reports
CSV rows per (trained task, evaluated task) cell, per-method mean and
population std over seeds, accuracy curves and the KD prompt/classifier grid
"""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass

from core.errors import EmptyReportError, FormatError
from core.metrics import MetricsReport, ResultMatrix, mean_std

logger = logging.getLogger(__name__)

CSV_FIELDS = ("run_id", "seed", "pool", "distill", "trained_task", "eval_task", "accuracy")
TEACHER = "teacher"

GRID_CELLS = OrderedDict([
    ("grid-p0c0", (False, False)),
    ("grid-p0c1", (False, True)),
    ("grid-p1c0", (True, False)),
    ("grid-p1c1", (True, True)),
])


@dataclass(frozen=True)
class ReportRow:
    run_id: str
    seed: int
    pool: str
    distill: str
    trained_task: int
    eval_task: int
    accuracy: float

    def to_csv(self):
        row = asdict(self)
        row["accuracy"] = repr(float(self.accuracy))
        return row

    @classmethod
    def from_csv(cls, row):
        try:
            return cls(
                run_id=row["run_id"],
                seed=int(row["seed"]),
                pool=row["pool"],
                distill=row["distill"],
                trained_task=int(row["trained_task"]),
                eval_task=int(row["eval_task"]),
                accuracy=float(row["accuracy"]),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise FormatError(f"Failed to parse result row {row!r}: {str(e)}")

    @property
    def variant(self):
        """Sweep variant, read back out of a ``{pool}-{distill}-{variant}-s{seed}`` run id"""
        if self.distill == TEACHER:
            return TEACHER
        prefix, suffix = f"{self.pool}-{self.distill}-", f"-s{self.seed}"
        middle = self.run_id[len(prefix):len(self.run_id) - len(suffix)]
        if self.run_id.startswith(prefix) and self.run_id.endswith(suffix) and middle:
            return middle
        return "base"

    @property
    def method(self):
        name = f"{self.pool}-{self.distill}"
        return name if self.variant in ("base", TEACHER) else f"{name}[{self.variant}]"


def rows_from_matrix(matrix, run_id, seed, pool, distill):
    rows = []
    for i in range(matrix.rows_complete()):
        for j, acc in enumerate(matrix.row(i)):
            rows.append(ReportRow(run_id, seed, pool, distill, i, j, float(acc)))
    return rows


def rows_from_result(cell, result):
    """Student rows for the cell plus the teacher's rows under a shared teacher run id"""
    rows = rows_from_matrix(result.student_matrix, cell.run_id, cell.seed, cell.pool, cell.distill)
    rows += rows_from_matrix(result.teacher_matrix, f"{cell.pool}-{TEACHER}-s{cell.seed}", cell.seed,
                             cell.pool, TEACHER)
    return rows


def merge_rows(groups):
    """Concatenate per-cell rows, keeping one copy of each (run_id, trained, eval) cell"""
    merged, seen = [], set()
    for rows in groups:
        for row in rows:
            key = (row.run_id, row.trained_task, row.eval_task)
            if key in seen:
                continue
            seen.add(key)
            merged.append(row)
    merged.sort(key=lambda r: (r.run_id, r.trained_task, r.eval_task))
    return merged


def matrices_by_run(rows):
    """run_id -> (first row, ResultMatrix) rebuilt from CSV rows"""
    grouped = OrderedDict()
    for row in rows:
        grouped.setdefault(row.run_id, []).append(row)
    out = OrderedDict()
    for run_id, members in grouped.items():
        tasks = max(r.trained_task for r in members) + 1
        matrix = ResultMatrix(tasks)
        for r in members:
            matrix.record(r.trained_task, r.eval_task, r.accuracy)
        out[run_id] = (members[0], matrix)
    return out


@dataclass
class MethodSummary:
    method: str
    acc_mean: float
    acc_std: float
    forgetting_mean: float
    forgetting_std: float
    seeds: list
    forgetting_defined: bool = True
    final_accuracies: list = None
    curve: list = None

    def to_dict(self):
        return {
            "method": self.method,
            "acc_mean": self.acc_mean,
            "acc_std": self.acc_std,
            "forgetting_mean": self.forgetting_mean,
            "forgetting_std": self.forgetting_std,
            "seeds": list(self.seeds),
            "forgetting_defined": self.forgetting_defined,
            "final_accuracies": self.final_accuracies,
            "curve": self.curve,
        }


def _mean_columns(lists):
    width = min(len(x) for x in lists)
    return [mean_std(x[i] for x in lists)[0] for i in range(width)]


def summarize(rows):
    """Per-method ACC / forgetting mean and population std over seeds"""
    if not rows:
        raise EmptyReportError("no completed runs to report")
    per_method = OrderedDict()
    for run_id, (first, matrix) in matrices_by_run(rows).items():
        if not matrix.is_complete():
            logger.warning("Skipping incomplete run %s (%d of %d rows)", run_id, matrix.rows_complete(), matrix.num_tasks)
            continue
        per_method.setdefault(first.method, []).append((first.seed, MetricsReport.from_matrix(matrix, first.seed)))
    if not per_method:
        raise EmptyReportError("no run has a complete result matrix")

    summaries = []
    for method, runs in per_method.items():
        runs.sort(key=lambda item: item[0])
        reports = [r for _, r in runs]
        acc_mean, acc_std = mean_std(r.avg_accuracy for r in reports)
        f_mean, f_std = mean_std(r.forgetting for r in reports)
        summaries.append(MethodSummary(
            method, acc_mean, acc_std, f_mean, f_std,
            [seed for seed, _ in runs],
            all(r.forgetting_defined for r in reports),
            _mean_columns([r.final_accuracies for r in reports]),
            _mean_columns([r.curve for r in reports]),
        ))
    return summaries


def ablation_grid(summaries):
    """KD prompt x KD classifier cells when every grid variant is present"""
    grid = {}
    for summary in summaries:
        for variant, (prompt, classifier) in GRID_CELLS.items():
            if summary.method.endswith(f"[{variant}]"):
                grid[(prompt, classifier)] = summary
    if len(grid) != len(GRID_CELLS):
        return None
    return [
        {"kd_prompt": prompt, "kd_classifier": classifier, "method": grid[(prompt, classifier)].method,
         "acc_mean": grid[(prompt, classifier)].acc_mean, "acc_std": grid[(prompt, classifier)].acc_std}
        for prompt, classifier in GRID_CELLS.values()
    ]


def format_table(summaries, grid=None):
    width = max([len(s.method) for s in summaries] + [6])
    lines = [f"{'method':<{width}}  {'Avg. Acc':>16}  {'Forgetting':>16}  seeds"]
    for s in summaries:
        forget = f"{s.forgetting_mean:6.2f} ± {s.forgetting_std:5.2f}"
        if not s.forgetting_defined:
            forget = f"{'undefined':>16}"
        lines.append(f"{s.method:<{width}}  {s.acc_mean:6.2f} ± {s.acc_std:5.2f}  {forget:>16}  "
                     f"{','.join(map(str, s.seeds))}")
    if grid:
        lines.append("")
        lines.append("KD prompt  KD classifier  Avg. Acc")
        for cell in grid:
            lines.append(f"{'yes' if cell['kd_prompt'] else 'no':<9}  {'yes' if cell['kd_classifier'] else 'no':<13}  "
                         f"{cell['acc_mean']:6.2f} ± {cell['acc_std']:5.2f}")
    return "\n".join(lines) + "\n"
