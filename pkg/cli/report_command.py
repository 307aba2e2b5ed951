"""
report subcommand
Summary tables from one results.csv or a directory of per-run CSVs
"""

import glob
import logging
import os

from core.errors import EmptyReportError, MissingInputError
from core.report import ReportRow, ablation_grid, format_table, merge_rows, summarize
from utils.file_utils import FileUtils

logger = logging.getLogger(__name__)

SUMMARY_FIELDS = ("method", "acc_mean", "acc_std", "forgetting_mean", "forgetting_std", "seeds")


def register(sub, parent):
    report = sub.add_parser("report", parents=[parent], help="summarize result CSVs into tables")
    report.add_argument("--results", default=None,
                        help="results.csv or a directory of per-run CSVs (default: <out>/results.csv)")
    report.set_defaults(handler=cmd_report)


def result_files(path):
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.csv")))
        if not files:
            raise EmptyReportError(f"no result CSVs in {path}")
        return files
    if not os.path.exists(path):
        raise MissingInputError(f"{path} does not exist; produce it with: cdl run --out <dir>")
    return [path]


def load_rows(path):
    utils = FileUtils()
    groups = []
    for filename in result_files(path):
        groups.append([ReportRow.from_csv(row) for row in utils.read_csv(filename)])
    return merge_rows(groups)


def build_report(rows):
    """(text table, summary CSV rows, machine-readable document)"""
    summaries = summarize(rows)
    grid = ablation_grid(summaries)
    table = format_table(summaries, grid)
    csv_rows = []
    for s in summaries:
        row = {k: v for k, v in s.to_dict().items() if k in SUMMARY_FIELDS}
        row["seeds"] = " ".join(map(str, s.seeds))
        csv_rows.append(row)
    document = {
        "summaries": [s.to_dict() for s in summaries],
        "ablation_grid": grid,
        "curves": {s.method: s.curve for s in summaries},
    }
    return table, csv_rows, document


def cmd_report(args):
    from cli.app import EXIT_OK, prepare_out

    out = prepare_out(args.out)
    rows = load_rows(args.results or os.path.join(out, "results.csv"))
    table, csv_rows, document = build_report(rows)
    utils = FileUtils()
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as f:
        f.write(table)
    utils.write_csv(os.path.join(out, "report_summary.csv"), SUMMARY_FIELDS, csv_rows)
    utils.write_json(os.path.join(out, "report.json"), document)
    print(table, end="")
    return EXIT_OK
