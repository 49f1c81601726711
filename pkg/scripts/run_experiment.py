#!/usr/bin/env python3
"""Run one experiment from a JSON config and write report.json / curves.csv.

Thin wrapper over the `augbackdoor run` CLI for people who prefer scripts.
"""

import sys

from augbackdoor.cli import main

if __name__ == "__main__":
    sys.exit(main(["run", *sys.argv[1:]]))
