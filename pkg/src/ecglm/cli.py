"""Command-line entry point.

    ecglm <command> [--config PATH] [--seed N] [--out DIR] [--set key=value ...]

Commands: synth, train-tokenizer, tokenize, detokenize, pretrain, finetune,
eval, importance, pipeline, config (print the effective configuration;
``config --defaults`` prints the documented defaults).

The default config path can also come from the ECGLM_CONFIG environment
variable. Exit codes: 0 ok, 1 user error (bad arguments, config, missing
inputs), 2 internal error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .nnops import InvalidInputError
from .pipeline import (PipelineError, run_detokenize, run_eval, run_finetune,
                       run_importance, run_pipeline, run_pretrain, run_synth,
                       run_tokenize, run_train_tokenizer)
from .signals import SignalError

ENV_CONFIG = "ECGLM_CONFIG"

COMMANDS = {
    "synth": run_synth,
    "train-tokenizer": run_train_tokenizer,
    "tokenize": run_tokenize,
    "detokenize": run_detokenize,
    "pretrain": run_pretrain,
    "finetune": run_finetune,
    "eval": run_eval,
    "importance": run_importance,
    "pipeline": run_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecglm", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=[*COMMANDS, "config"])
    parser.add_argument("--config", default=None,
                        help=f"config file (default: ${ENV_CONFIG} if set)")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out", default=None, help="override paths.output_dir")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override any config key")
    parser.add_argument("--defaults", action="store_true",
                        help="with 'config': print defaults instead of the"
                             " effective configuration")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    path = args.config or os.environ.get(ENV_CONFIG) or None
    cfg = load_config(path, args.overrides)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.out is not None:
        cfg.set("paths.output_dir", args.out)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s")
    try:
        if args.command == "config":
            if args.defaults:
                print(ExperimentConfig().dump(), end="")
            else:
                print(_resolve_config(args).dump(), end="")
            return 0
        cfg = _resolve_config(args)
        COMMANDS[args.command](cfg)
        return 0
    except (ConfigError, PipelineError, SignalError, InvalidInputError,
            FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - report and exit nonzero
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
