"""Empirical-measure W2 rates: Gaussian in one dimension and the uniform cube in five."""

import sys

from mkvswitch.cli import run
from mkvswitch.config import parse_config

from _common import CONFIGS

if __name__ == "__main__":
    status = 0
    for name in ("fg14_gaussian_d1.toml", "fg14_uniform_d5.toml"):
        status = max(status, run("fg14", parse_config(CONFIGS / name)))
    sys.exit(status)
