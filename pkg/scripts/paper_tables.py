"""Recompute both published per-peer cost tables; exits nonzero on any cell mismatch."""
import sys

from p2pfaas.cli import main

if __name__ == "__main__":
    sys.exit(main(["paper-tables", *sys.argv[1:]]))
