"""Total-variation decay of the regime chain towards its invariant law."""

import sys

from _common import run_config

if __name__ == "__main__":
    sys.exit(run_config("ergodicity", "ergodicity.toml", __doc__))
