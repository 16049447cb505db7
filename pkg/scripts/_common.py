"""Shared helpers for the experiment scripts."""

import argparse
from pathlib import Path

from mkvswitch.cli import run
from mkvswitch.config import parse_config, validate_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run_config(subcommand: str, default: str, description: str) -> int:
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("config", nargs="?", default=str(CONFIGS / default))
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--output-dir", default=None)
    args = parser.parse_args()
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    validate_config(cfg)
    return run(subcommand, cfg, args.output_dir)
