"""Command-line entry point: ``python -m advdetect <command> [--config PATH] [--key value ...]``.

Exit codes: 0 success, 2 configuration error, 3 data or artifact error.
"""
import argparse
import logging
import sys

import torch

from advdetect import __version__
from advdetect.cli import closeness, craft, evaluate, train
from advdetect.config import settings
from advdetect.exceptions import ConfigError, DataFormatError
from advdetect.schemas.experiment import load_config, normalize_key

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

COMMAND_MODULES = (train, closeness, craft, evaluate)


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="experiment config file (key = value lines)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out-dir", help="directory for checkpoints, CSVs and SVGs")
    common.add_argument("--cap", type=int, help="number of test samples per (attack, eps) cell")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advdetect",
        allow_abbrev=False,
        description="Adversarial-example detection with MC-dropout uncertainty and feature-space closeness.",
        epilog="Any ExperimentConfig field can be overridden with --<field> <value> (dashes or underscores).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    common = _common_options()
    for module in COMMAND_MODULES:
        module.register(subparsers, common)
    return parser


def parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs left over by argparse."""
    overrides: dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError(f"Unexpected argument '{token}'")
        key, sep, value = token[2:].partition("=")
        if not sep:
            if i + 1 >= len(extra) or extra[i + 1].startswith("--"):
                raise ConfigError(f"Override --{key} needs a value")
            value = extra[i + 1]
            i += 1
        overrides[normalize_key(key)] = value
        i += 1
    return overrides


def _setup_logging() -> None:
    logging.basicConfig(level=settings.LOG_LEVEL.upper(), format=settings.LOG_FORMAT, stream=sys.stderr)
    if settings.TORCH_THREADS > 0:
        torch.set_num_threads(settings.TORCH_THREADS)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    _setup_logging()

    try:
        overrides = parse_overrides(extra)
        for flag, key in (("seed", "seed"), ("out_dir", "out_dir"), ("cap", "cap")):
            value = getattr(args, flag, None)
            if value is not None:
                overrides[key] = str(value)
        cfg = load_config(args.config, overrides)
        logger.info("Running %s on %s (seed=%d)", args.command, cfg.dataset.value, cfg.seed)
        args.handler(cfg, args)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        print(f"advdetect: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as e:
        logger.error("Data error: %s", e)
        print(f"advdetect: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK
