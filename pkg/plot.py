"""Command-line entry point for ``der plot``."""

import sys

from der.cli import main

if __name__ == "__main__":
    sys.exit(main(["plot", *sys.argv[1:]]))
