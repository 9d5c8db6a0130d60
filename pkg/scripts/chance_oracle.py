"""Chance level of the edge-recovery count when exported entries are random.

Draws two independent top-k lists of ordered off-diagonal pairs and counts the
planted undirected edges hit by their union, then the probability that at
least ``need`` of ``n_seeds`` independent runs reach ``threshold`` by luck.
"""
import argparse

import numpy as np
from scipy.stats import binom

from fat_eeg.autodiff import make_rng
from fat_eeg.data import DEFAULT_EDGES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--k", type=int, default=15)
    ap.add_argument("--draws", type=int, default=100_000)
    ap.add_argument("--threshold", type=int, default=5)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--need", type=int, default=3)
    args = ap.parse_args()

    C = args.channels
    pairs = np.array([(i, j) for i in range(C) for j in range(C) if i != j])
    truth = {frozenset(e) for e in DEFAULT_EDGES}
    rng = make_rng(0)
    single, union = np.empty(args.draws, int), np.empty(args.draws, int)
    for d in range(args.draws):
        a = pairs[rng.choice(len(pairs), args.k, replace=False)]
        b = pairs[rng.choice(len(pairs), args.k, replace=False)]
        sa = {frozenset(p) for p in a.tolist()} & truth
        single[d] = len(sa)
        union[d] = len(sa | ({frozenset(p) for p in b.tolist()} & truth))
    p = float(np.mean(union >= args.threshold))
    print(f"one list:  mean hits {single.mean():.3f}")
    print(f"union:     mean hits {union.mean():.3f}  P(>= {args.threshold}) = {p:.4f}")
    print(f"P(>= {args.need} of {args.seeds} seeds by chance) = {binom.sf(args.need - 1, args.seeds, p):.4f}")


if __name__ == "__main__":
    main()
