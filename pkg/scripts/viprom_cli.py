#!/usr/bin/env python3
"""Runnable wrapper around the ``viprom`` console script.

Usage:
    python scripts/viprom_cli.py --help
    python scripts/viprom_cli.py -p synth-corpus --out runs/corpus
    python scripts/viprom_cli.py bench run --spec grid.yaml --workers 2
"""

from viprom_lab.cli import main

if __name__ == "__main__":
    main()
