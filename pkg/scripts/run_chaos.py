"""Propagation of chaos rates for the switching mean-field OU model."""

import sys

from _common import run_config

if __name__ == "__main__":
    sys.exit(run_config("chaos", "chaos.toml", __doc__))
