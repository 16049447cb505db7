"""Averaging principle as the switching time scale shrinks."""

import sys

from _common import run_config

if __name__ == "__main__":
    sys.exit(run_config("average", "average.toml", __doc__))
