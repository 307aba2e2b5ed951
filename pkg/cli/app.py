"""
Command-line surface
Builds the argument parser and maps failures onto exit codes
"""

import argparse
import logging
import os

from core.config_manager import parse_config
from core.errors import CDLError, ConfigurationError
from utils.file_utils import FileUtils
from utils.validators import FileValidator

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2

DEFAULT_OUT = "cdl_out"


def common_options():
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--seed", type=int, default=None, help="seed override (runs: single seed; data: dataset seed)")
    parser.add_argument("--out", default=DEFAULT_OUT, help="output directory (default: %(default)s)")
    parser.add_argument("--config", default=None, help="JSON config file or inline JSON text")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="warnings and errors only")
    parser.add_argument("--progress", action="store_true", help="show progress bars")
    return parser


def build_parser():
    from cli import data_command, gradcheck_command, report_command, run_command

    parser = argparse.ArgumentParser(
        prog="cdl",
        description="Continual distillation lab: prompt-based continual learning with teacher-to-student distillation",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    parent = common_options()
    data_command.register(sub, parent)
    run_command.register(sub, parent)
    gradcheck_command.register(sub, parent)
    report_command.register(sub, parent)
    return parser


def configure_logging(args):
    level = logging.INFO
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    elif getattr(args, "quiet", False):
        level = logging.WARNING
    logging.basicConfig(
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        level=level,
        force=True,
    )


def load_config(args):
    return parse_config(args.config)


def prepare_out(path):
    ok, message = FileValidator().is_writable_directory(path)
    if not ok:
        raise ConfigurationError(f"cannot use output directory {path}: {message}")
    ok, message = FileUtils().ensure_directory_exists(path)
    if not ok:
        raise ConfigurationError(f"cannot create output directory {path}: {message}")
    return path


def data_dir(config, args):
    return config.get("data_dir") or os.path.join(args.out, "data")


def weights_dir(config, args):
    return config.get("weights_dir") or os.path.join(args.out, "weights")


def run_cli(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args)
    try:
        return args.handler(args)
    except ConfigurationError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG_ERROR
    except CDLError as e:
        logger.error("%s", e)
        return EXIT_RUN_FAILURE
    except KeyboardInterrupt:
        logger.error("Interrupted")
        return EXIT_RUN_FAILURE
