"""One particle-system run with trajectory dump."""

import sys

from _common import run_config

if __name__ == "__main__":
    sys.exit(run_config("simulate", "simulate.toml", __doc__))
