"""LOSO accuracy of the full model vs. its degenerate variant on synthetic draws.

    python scripts/run_directional.py --seeds 0 1 2 3 4 --out results/directional.json
"""
import argparse
import functools
import json
from pathlib import Path

from fat_eeg.benchmarks import BENCH_MODEL, BENCH_TRAIN, directional_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    res = directional_benchmark(args.seeds, jobs=args.jobs, log=functools.partial(print, flush=True))
    print(f"fat {res.mean('fat'):.4f}  degenerate {res.mean('degenerate'):.4f}  "
          f"margin {res.margin:+.4f}  ({res.seconds:.0f}s, {BENCH_TRAIN.epochs} epochs)")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"seeds": res.seeds, "accuracy": res.accuracy, "seconds": res.seconds,
                                        "model": BENCH_MODEL.to_dict(), "train": BENCH_TRAIN.to_dict()}, indent=2))


if __name__ == "__main__":
    main()
