#!/usr/bin/env python3
"""Generate a synthetic PCFG corpus with gold derivation trees.

Writes <out>/train.txt, <out>/train.trees, <out>/test.txt, <out>/test.trees.
"""

import argparse
from pathlib import Path

from synlm.pcfg import sample_corpus, write_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--train", type=int, default=50000)
    ap.add_argument("--test", type=int, default=500)
    ap.add_argument("--max-len", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = sample_corpus(args.train, seed=args.seed, max_len=args.max_len)
    test = sample_corpus(args.test, seed=args.seed + 1, max_len=args.max_len)
    write_corpus(train, out / "train.txt", out / "train.trees")
    write_corpus(test, out / "test.txt", out / "test.trees")
    lens = [len(d.tokens) for d in train]
    print(f"wrote {len(train)} train / {len(test)} test sentences to {out}")
    print(f"lengths: min {min(lens)} mean {sum(lens)/len(lens):.1f} max {max(lens)}")


if __name__ == "__main__":
    main()
