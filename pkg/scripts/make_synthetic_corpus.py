#!/usr/bin/env python3
"""Emit a synthetic annotated corpus as JSONL.

Two flavors: "random" records with possibly nested/overlapping fragment
annotations, and a small "overfit" set of distinctive pairs for
memorization experiments.
"""

import argparse

import numpy as np

from fragdesign.corpus import write_corpus
from fragdesign.synthetic import overfit_records, synthetic_records


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--kind", choices=("random", "overfit"), default="random")
    parser.add_argument("--count", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--min-len", type=int, default=20)
    parser.add_argument("--max-len", type=int, default=80)
    args = parser.parse_args()

    if args.kind == "overfit":
        records = overfit_records(args.count, seed=args.seed)
    else:
        rng = np.random.default_rng(args.seed)
        records = synthetic_records(
            args.count, rng, min_len=args.min_len, max_len=args.max_len
        )
    write_corpus(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")


if __name__ == "__main__":
    main()
