"""Training loop, evaluation, scheme orchestration, ablations and adjacency export."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, NonFiniteError, Tape, Tensor, adam_step, cross_entropy, make_rng
from .data import (
    AugmentConfig,
    FeatureDataset,
    band_scale_augment,
    make_splits,
    one_hot,
    select_bands,
    sine_perturb,
)
from .layers import parameters
from .model import FATConfig, FATModel, build_model, checkpoint_bytes, fat_forward

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 64
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "augment" in d and isinstance(d["augment"], dict):
            aug = dict(d["augment"])
            if "band_scale_range" in aug:
                aug["band_scale_range"] = tuple(aug["band_scale_range"])
            d["augment"] = AugmentConfig(**aug)
        return cls(**d)


@dataclass
class RunMetrics:
    scheme: str
    fold_accuracies: list[float]
    mean: float
    std: float
    loss_curves: list[list[float]] = field(default_factory=list)
    train_accuracies: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "type": "summary",
            "scheme": self.scheme,
            "n_folds": len(self.fold_accuracies),
            "fold_accuracies": self.fold_accuracies,
            "mean": self.mean,
            "std": self.std,
        }


def aggregate(accs) -> tuple[float, float]:
    """Mean and population standard deviation of fold accuracies."""
    a = np.asarray(accs, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=0))


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    # batchnorm cannot train on a single sample
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def augment_batch(x: np.ndarray, y: np.ndarray, n_classes: int, rng: np.random.Generator,
                  aug: AugmentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Band scaling and sine perturbation per sample, then batch Mixup."""
    x = np.array(x, dtype=np.float64, copy=True)
    for i in range(len(x)):
        x[i] = sine_perturb(band_scale_augment(x[i], rng, aug), rng, aug)
    soft = one_hot(y, n_classes)
    if aug.mixup and len(x) > 1:
        lam = float(rng.beta(aug.mixup_alpha, aug.mixup_alpha))
        perm = rng.permutation(len(x))
        x = lam * x + (1 - lam) * x[perm]
        soft = lam * soft + (1 - lam) * soft[perm]
    return x, soft


def predict(model: FATModel, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
    dtype = model.head.weight.dtype
    out = [fat_forward(model, Tensor(samples[i : i + batch_size].astype(dtype)), "eval").data
           for i in range(0, len(samples), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("cannot score an empty set")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: FATModel, ds: FeatureDataset, indices) -> float:
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        raise ValueError("empty index set")
    return accuracy(predict(model, ds.samples[indices]), ds.labels[indices])


def train(model: FATModel, ds: FeatureDataset, train_idx, cfg: TrainConfig, rng: np.random.Generator,
          test_idx=None, on_epoch=None) -> tuple[FATModel, dict]:
    """Optimise ``model`` in place on ``ds[train_idx]``.

    Returns the model and a metrics fragment with the per-epoch loss curve,
    final train accuracy and (if ``test_idx`` is given) final test accuracy.
    ``on_epoch(epoch, record)`` receives one dict per epoch.
    """
    train_idx = np.asarray(train_idx, dtype=int)
    if train_idx.size == 0:
        raise ValueError("empty training set")
    params = parameters(model)
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    dtype = model.head.weight.dtype
    losses = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for b in _batches(train_idx.size, cfg.batch_size, rng):
            idx = train_idx[b]
            x, soft = augment_batch(ds.samples[idx], ds.labels[idx], ds.n_classes, rng, cfg.augment)
            for p in params:
                p.grad = None
            try:
                with Tape() as tape:
                    loss = cross_entropy(fat_forward(model, Tensor(x.astype(dtype)), "train", rng), soft)
                tape.backward(loss)
            except NonFiniteError as e:
                raise DivergenceError(f"non-finite values at epoch {epoch}: {e}") from e
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            adam_step(params, [p.grad for p in params], state)
            total += lv * len(idx)
            count += len(idx)
        losses.append(total / count)
        rec = {"epoch": epoch, "loss": losses[-1]}
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 and test_idx is not None and len(test_idx):
            rec["test_accuracy"] = evaluate(model, ds, test_idx)
        if on_epoch is not None:
            on_epoch(epoch, rec)
    frag = {"loss_curve": losses, "train_accuracy": evaluate(model, ds, train_idx)}
    if test_idx is not None and len(test_idx):
        frag["test_accuracy"] = evaluate(model, ds, test_idx)
    return model, frag


def _run_fold(args):
    ds, fold, train_idx, test_idx, model_cfg, train_cfg = args
    model = build_model(dataclasses.replace(model_cfg, seed=train_cfg.seed), make_rng(train_cfg.seed, fold, 0))
    records = []
    model, frag = train(model, ds, train_idx, train_cfg, make_rng(train_cfg.seed, fold, 1), test_idx,
                        on_epoch=lambda e, r: records.append({"type": "epoch", "fold": fold, **r}))
    return fold, frag, records, checkpoint_bytes(model)


def fit_config_to_data(model_cfg: FATConfig, ds: FeatureDataset) -> FATConfig:
    return dataclasses.replace(model_cfg, n_channels=ds.n_channels, n_bands=ds.n_bands, n_classes=ds.n_classes)


def run_scheme(ds: FeatureDataset, scheme: str, model_cfg: FATConfig, train_cfg: TrainConfig, jobs: int = 1,
               out_dir=None) -> RunMetrics:
    """Train a fresh model per fold of ``scheme`` and aggregate test accuracy.

    Fold ``i`` draws its initial weights from ``(seed, i, 0)`` and its
    training stream from ``(seed, i, 1)``, so folds are independent and may
    run in parallel. With ``out_dir`` the metrics JSONL and one checkpoint
    per fold are written there.
    """
    model_cfg = fit_config_to_data(model_cfg, ds)
    model_cfg.validate()
    plan = make_splits(ds, scheme, seed=train_cfg.seed)
    work = [(ds, i, tr, te, model_cfg, train_cfg) for i, (tr, te) in enumerate(plan.folds)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as ex:
            results = list(ex.map(_run_fold, work))
    else:
        results = [_run_fold(w) for w in work]
    results.sort(key=lambda r: r[0])
    accs = [r[1]["test_accuracy"] for r in results]
    mean, std = aggregate(accs)
    metrics = RunMetrics(scheme, accs, mean, std, [r[1]["loss_curve"] for r in results],
                         [r[1]["train_accuracy"] for r in results])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.jsonl", "w") as fh:
            for fold, frag, records, _ in results:
                for rec in records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.write(json.dumps({"type": "fold", "fold": fold, "test_accuracy": frag["test_accuracy"],
                                     "train_accuracy": frag["train_accuracy"]}, sort_keys=True) + "\n")
            fh.write(json.dumps(metrics.summary(), sort_keys=True) + "\n")
        (out / "summary.json").write_text(json.dumps(metrics.summary(), sort_keys=True) + "\n")
        for fold, _, _, ckpt in results:
            (out / f"fold{fold:02d}.ckpt").write_bytes(ckpt)
    return metrics


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationGrid:
    name: str
    cells: list[dict]

    def validate(self, model_cfg: FATConfig) -> None:
        for cell in self.cells:
            overrides = {k: v for k, v in cell.items() if k != "bands"}
            dataclasses.replace(model_cfg, **overrides).validate()


def named_grid(name: str) -> AblationGrid:
    if name == "pratio":
        return AblationGrid(name, [{"p_ratio": r, "use_adjacency": True} for r in (0.0, 0.125, 0.25, 0.375)])
    if name == "ada":
        cells = [(0.0, False), (0.0, True), (0.125, True), (0.25, True), (0.25, False), (0.375, True)]
        return AblationGrid(name, [{"p_ratio": r, "use_adjacency": a} for r, a in cells])
    if name == "bands":
        subsets = [["delta"], ["theta"], ["alpha"], ["beta"], ["gamma"], ["beta", "gamma"],
                   ["beta", "gamma", "delta"], ["delta", "theta", "alpha", "beta", "gamma"]]
        return AblationGrid(name, [{"bands": s} for s in subsets])
    raise KeyError(f"unknown grid {name!r}; expected pratio, bands or ada")


def run_ablation(ds: FeatureDataset, grid: AblationGrid, model_cfg: FATConfig, train_cfg: TrainConfig,
                 scheme: str = "loso", jobs: int = 1) -> list[dict]:
    """One :func:`run_scheme` per grid cell; returns one table row per cell."""
    grid.validate(model_cfg)
    rows = []
    for cell in grid.cells:
        cell_ds = select_bands(ds, cell["bands"]) if "bands" in cell else ds
        overrides = {k: v for k, v in cell.items() if k != "bands"}
        cfg = dataclasses.replace(model_cfg, **overrides)
        m = run_scheme(cell_ds, scheme, cfg, train_cfg, jobs=jobs)
        rows.append({
            "grid": grid.name,
            "bands": "+".join(cell_ds.band_names),
            "n_bands": cell_ds.n_bands,
            "p_ratio": cfg.p_ratio,
            "use_adjacency": cfg.use_adjacency,
            "scheme": scheme,
            "mean": m.mean,
            "std": m.std,
            "fold_accuracies": " ".join(repr(a) for a in m.fold_accuracies),
        })
    return rows


ABLATION_COLUMNS = ("grid", "bands", "n_bands", "p_ratio", "use_adjacency", "scheme", "mean", "std", "fold_accuracies")


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# adjacency export


def topk_offdiag(a: np.ndarray, k: int) -> list[tuple[int, int, float]]:
    """Largest ``k`` off-diagonal entries by magnitude; ties keep row-major order."""
    C = a.shape[0]
    if k > C * C - C or k < 0:
        raise ValueError(f"k={k} exceeds the {C * C - C} off-diagonal entries")
    ii, jj = np.nonzero(~np.eye(C, dtype=bool))
    vals = a[ii, jj]
    order = np.argsort(-np.abs(vals), kind="stable")[:k]
    return [(int(ii[o]), int(jj[o]), float(vals[o])) for o in order]


def export_adjacency_topk(model: FATModel, k: int = 15) -> dict[str, list[tuple[int, int, float]]]:
    if model.adjacency is None:
        raise ValueError("model has no adjacency matrices")
    return {
        "periodic": topk_offdiag(model.adjacency.a_p.data, k),
        "aperiodic": topk_offdiag(model.adjacency.a_a.data, k),
    }


def adjacency_csv(edges: dict, channel_names=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["component", "i", "j", "channel_name_i", "channel_name_j", "weight"])
    for comp, rows in edges.items():
        for i, j, wt in rows:
            ni = channel_names[i] if channel_names else f"ch{i}"
            nj = channel_names[j] if channel_names else f"ch{j}"
            w.writerow([comp, i, j, ni, nj, repr(wt)])
    return buf.getvalue()


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
