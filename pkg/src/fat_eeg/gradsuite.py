"""Finite-difference gradient checks for every differentiable component."""
from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import autodiff as ad
from .attention import AdjacencyPair, FAAParams, HeadPartition, MHSAParams, faa_forward, mhsa_forward
from .autodiff import DOUBLE, Tensor, cross_entropy, gradcheck, make_rng
from .layers import EmbeddingParams, FALParams, FANParams, PositionalEmbedding, cast, embed_forward, fal_forward, \
    fan_forward, parameters
from .model import FATConfig, build_model, fat_forward

TOLERANCE = 1e-4
TOY_CONFIG = FATConfig(embed_dim=16, heads=2, depth=2, p_ratio=0.5, use_adjacency=True, n_channels=4, n_bands=5,
                       n_classes=3, ffn_mult=4, dropout=0.0, qkv_layer="fal", positional=True, seed=0)


def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=DOUBLE)


def _projected(fn, out_shape, rng):
    """Scalar probe ``sum(fn() * w)`` for a fixed random ``w``."""
    w = Tensor(rng.standard_normal(out_shape), dtype=DOUBLE)
    return lambda: ad.tsum(ad.mul(fn(), w))


def check_primitives(rng) -> float:
    worst = 0.0
    a, b = _leaf(rng, 4, 5), _leaf(rng, 5, 3)
    worst = max(worst, gradcheck(_projected(lambda: ad.matmul(a, b), (4, 3), rng), [a, b]))
    x = _leaf(rng, 3, 4)
    y = _leaf(rng, 3, 4)
    for fn in (ad.sin, ad.cos, ad.sigmoid, ad.gelu, ad.exp, ad.softmax_rows, ad.log_softmax_rows):
        worst = max(worst, gradcheck(_projected(lambda fn=fn: fn(x), (3, 4), rng), [x]))
    for fn in (ad.add, ad.mul, ad.sub, ad.div):
        worst = max(worst, gradcheck(_projected(lambda fn=fn: fn(x, ad.add(y, 2.0)), (3, 4), rng), [x, y]))
    # keep relu away from its kink
    r = Tensor(rng.uniform(0.1, 1, (3, 4)) * rng.choice([-1, 1], (3, 4)), requires_grad=True, dtype=DOUBLE)
    worst = max(worst, gradcheck(_projected(lambda: ad.relu(r), (3, 4), rng), [r]))
    worst = max(worst, gradcheck(_projected(lambda: ad.concat([x, y], 0), (6, 4), rng), [x, y]))
    bn = ad.BatchNormState.create(4, DOUBLE)
    bn.weight.data = rng.uniform(0.5, 1.5, 4)
    t = _leaf(rng, 3, 2, 4)
    worst = max(worst, gradcheck(_projected(lambda: ad.batchnorm(t, bn, "train"), (3, 2, 4), rng),
                                 [t, bn.weight, bn.bias]))
    lw, lb = _leaf(rng, 4), _leaf(rng, 4)
    worst = max(worst, gradcheck(_projected(lambda: ad.layernorm(x, lw, lb), (3, 4), rng), [x, lw, lb]))
    soft = rng.dirichlet(np.ones(4), size=3)
    worst = max(worst, gradcheck(lambda: cross_entropy(x, soft), [x]))
    return worst


def check_fal(rng) -> float:
    p = FALParams.create(rng, 6, 10, 4, DOUBLE)
    p.b_n.data = rng.uniform(-1, 1, p.b_n.shape)
    x = _leaf(rng, 3, 6)
    return gradcheck(_projected(lambda: fal_forward(x, p), (3, 10), rng), [x, *parameters(p)])


def check_fan(rng) -> float:
    p = FANParams.create(rng, 6, 10, 4, DOUBLE, activation="gelu")
    p.b_n.data = rng.uniform(-1, 1, p.b_n.shape)
    x = _leaf(rng, 3, 6)
    return gradcheck(_projected(lambda: fan_forward(x, p), (3, 10), rng), [x, *parameters(p)])


def check_embedding(rng, cfg: FATConfig) -> float:
    p = EmbeddingParams.create(rng, cfg.n_bands, cfg.embed_dim, DOUBLE)
    pos = PositionalEmbedding.create(cfg.n_channels, cfg.embed_dim, True, DOUBLE)
    pos.table.data = rng.standard_normal(pos.table.shape) * 0.1
    x = _leaf(rng, 2, cfg.n_channels, cfg.n_bands)
    fn = _projected(lambda: embed_forward(x, p, "train", pos), (2, cfg.n_channels, cfg.embed_dim), rng)
    return gradcheck(fn, [x, *parameters(p), pos.table])


def check_faa(rng, cfg: FATConfig) -> float:
    part = HeadPartition.from_ratio(cfg.embed_dim, cfg.heads, cfg.p_ratio)
    p = FAAParams.create(rng, part, "fal", DOUBLE)
    adj = AdjacencyPair.create(cfg.n_channels, DOUBLE)
    adj.a_p.data = rng.standard_normal(adj.a_p.shape)
    adj.a_a.data = rng.standard_normal(adj.a_a.shape)
    x = _leaf(rng, 2, cfg.n_channels, cfg.embed_dim)
    fn = _projected(lambda: faa_forward(x, p, adj, part), (2, cfg.n_channels, cfg.embed_dim), rng)
    return gradcheck(fn, [x, *parameters(p), adj.a_p, adj.a_a])


def check_mhsa(rng, cfg: FATConfig) -> float:
    p = MHSAParams.create(rng, cfg.embed_dim, DOUBLE)
    x = _leaf(rng, 2, cfg.n_channels, cfg.embed_dim)
    fn = _projected(lambda: mhsa_forward(x, p, cfg.heads), (2, cfg.n_channels, cfg.embed_dim), rng)
    return gradcheck(fn, [x, *parameters(p)])


def randomize(model, rng, scale: float = 0.3) -> None:
    """Give zero-initialised tensors (biases, adjacency, positions) nonzero values."""
    for p in parameters(model):
        if not np.any(p.data):
            p.data = (rng.standard_normal(p.shape) * scale).astype(p.dtype)


def check_fat(rng, cfg: FATConfig, max_entries: int | None = 48) -> float:
    """Loss gradient w.r.t. every parameter tensor; large tensors are sampled."""
    cfg = dataclasses.replace(cfg, dropout=0.0)
    model = build_model(cfg, rng)
    cast(model, DOUBLE)
    randomize(model, rng)
    x = Tensor(rng.standard_normal((2, cfg.n_channels, cfg.n_bands)), dtype=DOUBLE)
    y = np.arange(2) % cfg.n_classes
    return gradcheck(lambda: cross_entropy(fat_forward(model, x, "train"), y), parameters(model),
                     max_entries=max_entries, rng=rng)


def run_suite(cfg: FATConfig = TOY_CONFIG, seed: int = 0) -> list[tuple[str, float, float]]:
    """Run every check; returns ``(name, max relative error, seconds)`` rows."""
    checks = [
        ("autodiff.primitives", lambda r: check_primitives(r)),
        ("layers.fal", lambda r: check_fal(r)),
        ("layers.fan", lambda r: check_fan(r)),
        ("layers.embedding", lambda r: check_embedding(r, cfg)),
        ("attention.faa", lambda r: check_faa(r, cfg)),
        ("attention.mhsa", lambda r: check_mhsa(r, cfg)),
        ("model.fat_loss", lambda r: check_fat(r, cfg)),
    ]
    rows = []
    for i, (name, fn) in enumerate(checks):
        t0 = time.perf_counter()
        err = fn(make_rng(seed, i))
        rows.append((name, err, time.perf_counter() - t0))
    return rows
