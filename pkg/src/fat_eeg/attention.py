"""Fourier adjacency attention and a plain multi-head attention baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    SINGLE,
    Tensor,
    add,
    concat,
    dropout,
    matmul,
    mul,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    swapaxes,
    transpose,
)
from .layers import FALParams, FANParams, Linear, param, project

P_RATIOS = (0.0, 0.125, 0.25, 0.375)


@dataclass(frozen=True)
class HeadPartition:
    h: int
    n_p_heads: int
    d_head: int

    @classmethod
    def from_ratio(cls, embed_dim: int, h: int, p_ratio: float) -> "HeadPartition":
        if h < 1 or embed_dim % h:
            raise ValueError(f"embed_dim {embed_dim} not divisible by {h} heads")
        n = p_ratio * h
        if abs(n - round(n)) > 1e-9 or not 0 <= round(n) <= h:
            raise ValueError(f"p_ratio {p_ratio} does not map to whole heads for h={h}")
        part = cls(h, int(round(n)), embed_dim // h)
        if part.n_p_heads and part.d_head % 2:
            raise ValueError("periodic heads need an even head dimension")
        return part

    @property
    def n_a_heads(self) -> int:
        return self.h - self.n_p_heads

    @property
    def embed_dim(self) -> int:
        return self.h * self.d_head

    @property
    def n_per(self) -> int:
        return self.n_p_heads * self.d_head


def split_heads(t: Tensor, part: HeadPartition) -> tuple[Tensor | None, Tensor | None]:
    """[B, C, E] in ``[cos | sin | aperiodic]`` layout -> per-head tensors.

    Periodic head ``i`` gets cos columns ``i*d/2:(i+1)*d/2`` followed by the
    sin columns at the same positions, so each head sees whole Fourier pairs.
    Returns ``(periodic [B, n_p, C, d], aperiodic [B, n_a, C, d])``; either
    may be None when its head count is zero.
    """
    B, C, E = t.shape
    if E != part.embed_dim:
        raise ValueError(f"last axis {E} does not match partition width {part.embed_dim}")
    d, half = part.d_head, part.d_head // 2
    nh = part.n_per // 2
    per = aper = None
    if part.n_p_heads:
        c = reshape(t[..., :nh], (B, C, part.n_p_heads, half))
        s = reshape(t[..., nh : 2 * nh], (B, C, part.n_p_heads, half))
        per = transpose(concat([c, s], axis=-1), (0, 2, 1, 3))
    if part.n_a_heads:
        rest = t if not part.n_p_heads else t[..., 2 * nh :]
        aper = transpose(reshape(rest, (B, C, part.n_a_heads, d)), (0, 2, 1, 3))
    return per, aper


def merge_heads(per: Tensor | None, aper: Tensor | None, part: HeadPartition) -> Tensor:
    """Inverse of :func:`split_heads`."""
    parts = []
    if per is not None:
        B, _, C, d = per.shape
        x = transpose(per, (0, 2, 1, 3))  # B, C, n_p, d
        half = d // 2
        parts.append(reshape(x[..., :half], (B, C, part.n_per // 2)))
        parts.append(reshape(x[..., half:], (B, C, part.n_per // 2)))
    if aper is not None:
        B, _, C, d = aper.shape
        parts.append(reshape(transpose(aper, (0, 2, 1, 3)), (B, C, part.n_a_heads * d)))
    return concat(parts, axis=-1)


@dataclass
class AdjacencyPair:
    """Learned channel-by-channel score biases, one per component."""

    a_p: Tensor
    a_a: Tensor

    @classmethod
    def create(cls, n_channels: int, dtype=SINGLE) -> "AdjacencyPair":
        z = np.zeros((n_channels, n_channels), dtype)
        return cls(param(z.copy()), param(z.copy()))


@dataclass
class FAAParams:
    q: FALParams
    k: FALParams
    v: FALParams
    gate_p: Linear  # d_head -> 1
    gate_a: Linear
    w_out: Linear

    @classmethod
    def create(cls, rng, part: HeadPartition, kind: str = "fal", dtype=SINGLE, activation: str = "gelu") -> "FAAParams":
        E = part.embed_dim
        if kind == "fal":
            mk = lambda: FALParams.create(rng, E, E, part.n_per, dtype)  # noqa: E731
        elif kind == "fan":
            mk = lambda: FANParams.create(rng, E, E, part.n_per, dtype, activation=activation)  # noqa: E731
        else:
            raise ValueError(f"unknown projector kind {kind!r}")
        q, k, v = mk(), mk(), mk()
        return cls(
            q, k, v,
            Linear.create(rng, part.d_head, 1, dtype=dtype),
            Linear.create(rng, part.d_head, 1, dtype=dtype),
            Linear.create(rng, E, E, dtype=dtype),
        )


@dataclass
class MHSAParams:
    q: Linear
    k: Linear
    v: Linear
    w_out: Linear

    @classmethod
    def create(cls, rng, embed_dim: int, dtype=SINGLE) -> "MHSAParams":
        return cls(*(Linear.create(rng, embed_dim, embed_dim, dtype=dtype) for _ in range(4)))


@dataclass
class AttentionComponents:
    """Intermediates of one FAA call, for inspection and tests."""

    q_p: Tensor | None = None
    k_p: Tensor | None = None
    v_p: Tensor | None = None
    q_a: Tensor | None = None
    k_a: Tensor | None = None
    v_a: Tensor | None = None
    scores: dict = field(default_factory=dict)
    attn: dict = field(default_factory=dict)
    gates: dict = field(default_factory=dict)


def gated_scores(q: Tensor, k: Tensor, adj: Tensor | None = None, gate: Linear | None = None,
                 out: dict | None = None) -> Tensor:
    """``q k^T / sqrt(d) + sigmoid(gate(q)) * adj`` with one gate per query row."""
    d = q.shape[-1]
    s = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    if adj is None:
        return s
    C = q.shape[-2]
    if adj.shape != (C, C):
        raise ValueError(f"adjacency shape {adj.shape} != ({C}, {C})")
    g = sigmoid(gate(q))  # (..., C, 1)
    if out is not None:
        out["gate"] = g
    return add(s, mul(g, adj))


def _attend(q, k, v, adj, gate, rate, rng, key, comps):
    info = {}
    s = gated_scores(q, k, adj, gate, info)
    a = softmax_rows(s)
    if comps is not None:
        comps.scores[key] = s
        comps.attn[key] = a
        if "gate" in info:
            comps.gates[key] = info["gate"]
    return matmul(dropout(a, rate, rng), v)


def faa_forward(x: Tensor, p: FAAParams, adj: AdjacencyPair | None, part: HeadPartition,
                rate: float = 0.0, rng: np.random.Generator | None = None,
                comps: AttentionComponents | None = None) -> Tensor:
    """Multi-head Fourier adjacency attention over channel tokens [B, C, E].

    Periodic heads attend with ``adj.a_p``, aperiodic heads with ``adj.a_a``;
    ``adj=None`` removes the gated term entirely.
    """
    q_p, q_a = split_heads(project(x, p.q), part)
    k_p, k_a = split_heads(project(x, p.k), part)
    v_p, v_a = split_heads(project(x, p.v), part)
    if comps is not None:
        comps.q_p, comps.k_p, comps.v_p = q_p, k_p, v_p
        comps.q_a, comps.k_a, comps.v_a = q_a, k_a, v_a
    o_p = o_a = None
    if q_p is not None:
        o_p = _attend(q_p, k_p, v_p, adj.a_p if adj else None, p.gate_p, rate, rng, "p", comps)
    if q_a is not None:
        o_a = _attend(q_a, k_a, v_a, adj.a_a if adj else None, p.gate_a, rate, rng, "a", comps)
    return p.w_out(merge_heads(o_p, o_a, part))


def mhsa_forward(x: Tensor, p: MHSAParams, h: int, rate: float = 0.0,
                 rng: np.random.Generator | None = None, comps: AttentionComponents | None = None) -> Tensor:
    """Standard multi-head scaled dot-product self-attention."""
    B, C, E = x.shape
    if E % h:
        raise ValueError(f"embed_dim {E} not divisible by {h} heads")
    d = E // h

    def heads(t):
        return transpose(reshape(t, (B, C, h, d)), (0, 2, 1, 3))

    q, k, v = heads(p.q(x)), heads(p.k(x)), heads(p.v(x))
    s = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    a = softmax_rows(s)
    if comps is not None:
        comps.scores["a"] = s
        comps.attn["a"] = a
    o = matmul(dropout(a, rate, rng), v)
    return p.w_out(reshape(transpose(o, (0, 2, 1, 3)), (B, C, E)))
