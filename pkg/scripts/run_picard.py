"""Decoupling (Picard) iteration on one chain path."""

import sys

from _common import run_config

if __name__ == "__main__":
    sys.exit(run_config("picard", "picard.toml", __doc__))
