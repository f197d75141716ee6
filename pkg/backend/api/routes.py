# backend/api/routes.py
"""
OpfIQ command-line entry point
Registers all subcommands from split modules.
"""
import argparse

from core.config import settings
from api import bench, generate, report, solve, train, validate

COMMANDS = (validate, solve, generate, train, bench, report)


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the sampler/split seed")
    common.add_argument("--threads", type=int, default=settings.THREADS, help="worker processes for dataset generation")
    common.add_argument("--out", default=None, help="output directory (overrides the config)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opfiq",
        description=f"{settings.APP_NAME} v{settings.APP_VERSION}: ACOPF solving, datasets and learned surrogates",
    )
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = _common_options()
    for module in COMMANDS:
        module.register(subparsers, common)
    return parser
