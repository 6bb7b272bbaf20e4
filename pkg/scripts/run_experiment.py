#!/usr/bin/env python3
"""Run one or more experiment configs and write reports under --out."""

import argparse
import logging
import sys
from pathlib import Path

from uniret.cli import dispatch


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("configs", nargs="+", type=Path)
    parser.add_argument("--out", default="runs")
    parser.add_argument("--seed", type=int, default=None, help="run only this seed")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    status = 0
    for cfg in args.configs:
        argv = ["run", str(cfg), "--out", args.out]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        if args.threads is not None:
            argv += ["--threads", str(args.threads)]
        status = max(status, dispatch(argv))
    return status


if __name__ == "__main__":
    sys.exit(main())
