"""Entry point for ``python -m elastosim``."""

import sys

from elastosim.cli import cli_main

if __name__ == "__main__":
    sys.exit(cli_main())
