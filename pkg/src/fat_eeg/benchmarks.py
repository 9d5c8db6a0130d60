"""Synthetic benchmarks with known ground truth.

``directional_benchmark`` compares the full model against its degenerate
variant under LOSO; ``adjacency_recovery`` trains on a low-noise draw and
counts how many planted coupling edges appear among the exported top-k
adjacency entries; ``permutation_null`` gives the chance distribution of
that count; ``memorization`` checks that a tiny training set can be fit
exactly.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import make_rng
from .data import AugmentConfig, SyntheticSpec, generate_synthetic
from .model import FATConfig, build_model
from .train import (TrainConfig, evaluate, export_adjacency_topk, fit_config_to_data, run_scheme, topk_offdiag,
                    train)

BENCH_MODEL = FATConfig(embed_dim=32, heads=8, depth=2, p_ratio=0.25, use_adjacency=True)
BENCH_TRAIN = TrainConfig(epochs=40, batch_size=32)
VARIANTS = {"fat": {"p_ratio": 0.25, "use_adjacency": True}, "degenerate": {"p_ratio": 0.0, "use_adjacency": False}}
# decoys make co-activation the only label cue, so the adjacency has to carry it
RECOVERY_SPEC = SyntheticSpec(noise_scale=0.3, decoy_fraction=1.0)
RECOVERY_TRAIN = TrainConfig(epochs=200, batch_size=32)
MEMO_TRAIN = TrainConfig(epochs=200, batch_size=32, augment=AugmentConfig.disabled())


@dataclass
class DirectionalResult:
    seeds: list[int]
    accuracy: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, variant: str) -> float:
        return float(np.mean(self.accuracy[variant]))

    @property
    def margin(self) -> float:
        return self.mean("fat") - self.mean("degenerate")


def directional_benchmark(seeds=range(5), spec: SyntheticSpec | None = None, model_cfg: FATConfig = BENCH_MODEL,
                          train_cfg: TrainConfig = BENCH_TRAIN, jobs: int = 1, log=None) -> DirectionalResult:
    """LOSO mean accuracy of each variant in ``VARIANTS``, one dataset draw per seed."""
    spec = spec or SyntheticSpec()
    res = DirectionalResult(list(seeds), {v: [] for v in VARIANTS})
    t0 = time.perf_counter()
    for seed in res.seeds:
        _, ds, _ = generate_synthetic(spec, make_rng(seed))
        for name, overrides in VARIANTS.items():
            m = run_scheme(ds, "loso", dataclasses.replace(model_cfg, **overrides),
                           dataclasses.replace(train_cfg, seed=seed), jobs=jobs)
            res.accuracy[name].append(m.mean)
            if log:
                log(f"seed {seed} {name}: {m.mean:.4f} folds {np.round(m.fold_accuracies, 3).tolist()}")
    res.seconds = time.perf_counter() - t0
    return res


def undirected_hits(entries, edges) -> int:
    """Distinct true edges among exported ``(i, j, w)`` entries, ignoring direction."""
    truth = {frozenset(map(int, e)) for e in edges}
    return len({frozenset((int(i), int(j))) for i, j, _ in entries} & truth)


def union_hits(export: dict, edges) -> int:
    return undirected_hits([e for rows in export.values() for e in rows], edges)


def adjacency_recovery(seed: int, spec: SyntheticSpec = RECOVERY_SPEC, model_cfg: FATConfig = BENCH_MODEL,
                       train_cfg: TrainConfig = RECOVERY_TRAIN, k: int = 15):
    """Train on every trial of one draw; returns ``(hits, export, model, truth)``."""
    _, ds, truth = generate_synthetic(spec, make_rng(seed))
    cfg = fit_config_to_data(model_cfg, ds)
    model = build_model(cfg, make_rng(seed, 0, 0))
    train(model, ds, np.arange(len(ds)), dataclasses.replace(train_cfg, seed=seed), make_rng(seed, 0, 1))
    export = export_adjacency_topk(model, k)
    return union_hits(export, truth["coupling_edges"]), export, model, truth


def permutation_null(matrices, edges, k: int = 15, n_draws: int = 2000, rng=None) -> np.ndarray:
    """Union hit counts after relabelling channels by random permutations.

    All matrices share one permutation per draw, so their joint structure is
    kept while any alignment with the planted edges is destroyed.
    """
    rng = rng if rng is not None else make_rng(0)
    n = matrices[0].shape[0]
    out = np.empty(n_draws, dtype=int)
    for d in range(n_draws):
        perm = rng.permutation(n)
        entries = [e for a in matrices for e in topk_offdiag(a[np.ix_(perm, perm)], k)]
        out[d] = undirected_hits(entries, edges)
    return out


def memorization(p_ratio: float, n: int = 32, seed: int = 0, model_cfg: FATConfig = BENCH_MODEL,
                 train_cfg: TrainConfig = MEMO_TRAIN) -> tuple[float, int | None]:
    """Fit the first ``n`` trials of a default synthetic draw.

    Returns the final train accuracy and the first epoch (1-based) at which
    it reached 1.0, or None.
    """
    _, ds, _ = generate_synthetic(SyntheticSpec(), make_rng(seed))
    idx = np.arange(n)
    cfg = fit_config_to_data(dataclasses.replace(model_cfg, p_ratio=p_ratio, dropout=0.0), ds)
    model = build_model(cfg, make_rng(seed, 0, 0))
    first = []

    def watch(epoch, rec):
        if not first and evaluate(model, ds, idx) == 1.0:
            first.append(epoch + 1)

    _, frag = train(model, ds, idx, train_cfg, make_rng(seed, 0, 1), on_epoch=watch)
    return frag["train_accuracy"], (first[0] if first else None)
