"""Command-line entry point for ``der train``."""

import sys

from der.cli import main

if __name__ == "__main__":
    sys.exit(main(["train", *sys.argv[1:]]))
