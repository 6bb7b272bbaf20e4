#!/usr/bin/env python3
"""Write the synthetic corpus and query splits as JSONL (corpus.jsonl, train.jsonl, val.jsonl)."""

import argparse

from uniret.synthetic import SyntheticConfig, generate


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--pages", type=int, default=SyntheticConfig.n_pages)
    args = parser.parse_args()
    world = generate(SyntheticConfig(n_pages=args.pages, seed=args.seed))
    world.save(args.out)
    print(f"{len(world.documents)} pages, {len(world.train)} train / {len(world.val)} val queries -> {args.out}")


if __name__ == "__main__":
    main()
