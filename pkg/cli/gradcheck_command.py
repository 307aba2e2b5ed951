"""
grad-check subcommand
"""

import logging
import os

from core.errors import ConfigurationError
from core.gradcheck_suite import registered_checks, run_gradcheck_suite
from utils.file_utils import FileUtils

logger = logging.getLogger(__name__)


def register(sub, parent):
    check = sub.add_parser("grad-check", parents=[parent], help="finite-difference check of every registered gradient")
    check.add_argument("--only", action="append", default=None, metavar="NAME",
                       help="run only checks whose name starts with NAME (repeatable)")
    check.add_argument("--eps", type=float, default=1e-5, help="central-difference step (default: %(default)s)")
    check.set_defaults(handler=cmd_gradcheck)


def select_checks(prefixes):
    checks = registered_checks()
    if not prefixes:
        return checks
    return [c for c in checks if any(c.name.startswith(p) for p in prefixes)]


def format_suite(entries):
    width = max([len(e.name) for e in entries] + [5])
    lines = [f"{'check':<{width}}  {'kind':<9}  {'max rel err':>12}  {'tol':>7}  result"]
    for e in entries:
        err = "-" if e.result is None else f"{e.result.max_error:12.3e}"
        lines.append(f"{e.name:<{width}}  {e.kind:<9}  {err:>12}  {e.tolerance:7.0e}  {'ok' if e.passed else 'FAIL'}")
        if e.error:
            lines.append(f"{'':<{width}}  {e.error}")
    return "\n".join(lines) + "\n"


def suite_document(entries):
    return {
        "passed": all(e.passed for e in entries),
        "checks": [
            {
                "name": e.name,
                "kind": e.kind,
                "tolerance": e.tolerance,
                "max_relative_error": None if e.result is None else e.result.max_error,
                "worst": None if e.result is None else f"{e.result.param}{list(e.result.index or ())}",
                "passed": e.passed,
                "error": e.error,
            }
            for e in entries
        ],
    }


def report_suite(entries, out=None):
    """Print the table, optionally write gradcheck.json; returns the failing names"""
    print(format_suite(entries), end="")
    if out:
        FileUtils().write_json(os.path.join(out, "gradcheck.json"), suite_document(entries))
    failed = [e.name for e in entries if not e.passed]
    for name in failed:
        logger.error("Gradient check failed: %s", name)
    return failed


def cmd_gradcheck(args):
    from cli.app import EXIT_OK, EXIT_RUN_FAILURE, prepare_out

    out = prepare_out(args.out)
    checks = select_checks(args.only)
    if not checks:
        raise ConfigurationError(f"no registered check matches {', '.join(args.only)}")
    entries = run_gradcheck_suite(checks, seed=args.seed or 0, eps=args.eps)
    failed = report_suite(entries, out)
    return EXIT_RUN_FAILURE if failed else EXIT_OK
