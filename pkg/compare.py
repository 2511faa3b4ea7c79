"""Command-line entry point for ``der compare``."""

import sys

from der.cli import main

if __name__ == "__main__":
    sys.exit(main(["compare", *sys.argv[1:]]))
