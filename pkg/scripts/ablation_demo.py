"""Run a named ablation grid on one synthetic draw and print the table.

    python scripts/ablation_demo.py --grid ada --seed 0 --epochs 40
"""
import argparse
import dataclasses

from fat_eeg.autodiff import make_rng
from fat_eeg.benchmarks import BENCH_MODEL, BENCH_TRAIN
from fat_eeg.data import SyntheticSpec, generate_synthetic
from fat_eeg.train import ablation_csv, named_grid, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="ada", choices=("pratio", "ada", "bands"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=BENCH_TRAIN.epochs)
    ap.add_argument("--scheme", default="loso")
    args = ap.parse_args()

    _, ds, _ = generate_synthetic(SyntheticSpec(), make_rng(args.seed))
    train_cfg = dataclasses.replace(BENCH_TRAIN, epochs=args.epochs, seed=args.seed)
    rows = run_ablation(ds, named_grid(args.grid), BENCH_MODEL, train_cfg, scheme=args.scheme)
    print(ablation_csv(rows), end="")


if __name__ == "__main__":
    main()
