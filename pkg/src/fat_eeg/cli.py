"""Command line entry point: ``fat-eeg <subcommand>``.

Exit codes: 0 success, 1 check failure, 2 usage or input error, 3 numerical
divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .autodiff import inject_gradient_fault, make_rng
from .data import DatasetFormatError, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .gradsuite import TOLERANCE, TOY_CONFIG, run_suite
from .model import CheckpointError, FATConfig, load_checkpoint
from .train import (
    DivergenceError,
    TrainConfig,
    ablation_csv,
    adjacency_csv,
    default_jobs,
    export_adjacency_topk,
    fit_config_to_data,
    named_grid,
    run_ablation,
    run_scheme,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
log = logging.getLogger("fat_eeg")


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read {path}: {e}") from e


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def resolve_config(args) -> dict:
    """Merge the JSON config file with flag overrides.

    File layout: ``{"model": {...FATConfig}, "train": {...TrainConfig with
    "augment": {...}}, "scheme": "loso"}``; every section is optional.
    """
    raw = _read_json(args.config) if getattr(args, "config", None) else {}
    unknown = set(raw) - {"model", "train", "scheme"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    model = dict(raw.get("model", {}))
    train = dict(raw.get("train", {}))
    for flag, key in (("p_ratio", "p_ratio"), ("embed_dim", "embed_dim"), ("heads", "heads"), ("depth", "depth"),
                      ("qkv_layer", "qkv_layer"), ("dropout", "dropout")):
        val = getattr(args, flag, None)
        if val is not None:
            model[key] = val
    if getattr(args, "adjacency", None) is not None:
        model["use_adjacency"] = args.adjacency
    for flag in ("epochs", "batch_size", "lr", "weight_decay", "seed"):
        val = getattr(args, flag, None)
        if val is not None:
            train[flag] = val
    if getattr(args, "no_augment", False):
        train["augment"] = {"band_scale": False, "sine": False, "mixup": False}
    scheme = getattr(args, "scheme", None) or raw.get("scheme", "loso")
    try:
        mcfg = FATConfig.from_dict(model)
        tcfg = TrainConfig.from_dict(train)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from e
    return {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "scheme": scheme}


def _load_data(path):
    try:
        return load_dataset(path)
    except (DatasetFormatError, OSError, KeyError) as e:
        raise UsageError(f"cannot load dataset {path}: {e}") from e


def cmd_gen_synth(args) -> int:
    try:
        spec = SyntheticSpec.from_dict(_read_json(args.spec)) if args.spec else SyntheticSpec()
        spec.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid synthetic spec: {e}") from e
    _, ds, truth = generate_synthetic(spec, make_rng(args.seed))
    out = Path(args.out)
    save_dataset(ds, out)
    (out / "ground_truth.json").write_text(_dump(truth))
    (out / "synthetic_spec.json").write_text(_dump({**spec.to_dict(), "seed": args.seed}))
    print(f"wrote {len(ds)} samples ({ds.n_channels} channels, {ds.n_bands} bands) to {out}")
    return EXIT_OK


def _prepare(args):
    resolved = resolve_config(args)
    ds = _load_data(args.data)
    mcfg = fit_config_to_data(FATConfig.from_dict(resolved["model"]), ds)
    try:
        mcfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    resolved["model"] = mcfg.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(_dump(resolved))
    return resolved, ds, mcfg, TrainConfig.from_dict(resolved["train"]), out


def cmd_train(args) -> int:
    resolved, ds, mcfg, tcfg, out = _prepare(args)
    try:
        metrics = run_scheme(ds, resolved["scheme"], mcfg, tcfg, jobs=args.jobs, out_dir=out)
    except ValueError as e:
        raise UsageError(str(e)) from e
    for i, acc in enumerate(metrics.fold_accuracies):
        print(f"fold {i}: test accuracy {acc:.4f}")
    print(f"{resolved['scheme']}: {100 * metrics.mean:.2f}/{100 * metrics.std:.2f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        grid = named_grid(args.grid)
    except KeyError as e:
        raise UsageError(str(e)) from e
    resolved, ds, mcfg, tcfg, out = _prepare(args)
    try:
        rows = run_ablation(ds, grid, mcfg, tcfg, scheme=resolved["scheme"], jobs=args.jobs)
    except (ValueError, KeyError) as e:
        raise UsageError(str(e)) from e
    (out / f"ablation_{grid.name}.csv").write_text(ablation_csv(rows))
    for r in rows:
        print(f"{r['bands']:<32} p_ratio={r['p_ratio']:<6} adjacency={r['use_adjacency']!s:<5} "
              f"{100 * r['mean']:.2f}/{100 * r['std']:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = TOY_CONFIG
    if args.config:
        try:
            cfg = dataclasses.replace(TOY_CONFIG, **_read_json(args.config).get("model", {}))
            cfg.validate()
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid config: {e}") from e
    if args.corrupt_derivative:
        with inject_gradient_fault(args.corrupt_derivative):
            rows = run_suite(cfg)
    else:
        rows = run_suite(cfg)
    ok = True
    for name, err, secs in rows:
        passed = err < TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:<22} max_rel_err={err:.3e} ({secs:.1f}s)")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_export_adjacency(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
        edges = export_adjacency_topk(model, args.k)
    except (CheckpointError, OSError, ValueError) as e:
        raise UsageError(f"cannot export from {args.checkpoint}: {e}") from e
    names = _load_data(args.data).channel_names if args.data else None
    text = adjacency_csv(edges, names)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(f"wrote top-{args.k} edges for {len(edges)} adjacency matrices to {out}")
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scheme", help="loso | ratio:a:b | kfold:k (default loso)")
    p.add_argument("--jobs", type=int, default=default_jobs(), help="parallel fold workers")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--p-ratio", type=float)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--qkv-layer", choices=("fal", "fan", "linear"))
    p.add_argument("--adjacency", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--no-augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fat-eeg", description="Fourier adjacency transformer for DE features")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset with known structure")
    p.add_argument("--spec", help="JSON SyntheticSpec (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train and evaluate under a split scheme")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="sweep an ablation grid")
    _add_run_flags(p)
    p.add_argument("--grid", required=True, help="pratio | bands | ada")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite on a toy config")
    p.add_argument("--config", help="JSON file whose 'model' section overrides the toy config")
    p.add_argument("--corrupt-derivative", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-adjacency", help="top-k adjacency edges from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory supplying channel names")
    p.set_defaults(func=cmd_export_adjacency)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
