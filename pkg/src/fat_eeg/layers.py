"""Projection layers: plain affine, FAL, the FAN baseline, and the DE embedding."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import (
    SINGLE,
    BatchNormState,
    Tensor,
    add,
    batchnorm,
    concat,
    cos,
    elementwise,
    matmul,
    relu,
    sin,
)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=SINGLE) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out else 0.0
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


@dataclass
class Linear:
    weight: Tensor  # (d_in, d_out)
    bias: Tensor | None

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, dtype=SINGLE) -> "Linear":
        b = param(np.zeros(d_out, dtype)) if bias else None
        return cls(param(xavier_uniform(rng, d_in, d_out, dtype)), b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"expected last axis {weight.shape[0]}, got {x.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


@dataclass
class FALParams:
    """Weights of a Fourier analytic projection.

    ``w_p`` has ``n_per // 2`` columns; its output is used twice (cos and
    sin), so the layer emits ``n_per`` periodic features followed by
    ``d_out - n_per`` affine ones.
    """

    w_p: Tensor | None  # (d_in, n_per/2), no bias
    w_n: Tensor | None  # (d_in, d_out - n_per)
    b_n: Tensor | None  # (d_out - n_per,)

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_out: int, n_per: int, dtype=SINGLE, **kw):
        if n_per % 2 or not 0 <= n_per <= d_out:
            raise ValueError(f"n_per must be even and within [0, {d_out}], got {n_per}")
        w_p = param(xavier_uniform(rng, d_in, n_per // 2, dtype)) if n_per else None
        n_a = d_out - n_per
        w_n = param(xavier_uniform(rng, d_in, n_a, dtype)) if n_a else None
        b_n = param(np.zeros(n_a, dtype)) if n_a else None
        return cls(w_p, w_n, b_n, **kw)

    @property
    def n_per(self) -> int:
        return 0 if self.w_p is None else 2 * self.w_p.shape[1]

    @property
    def d_in(self) -> int:
        return (self.w_p if self.w_p is not None else self.w_n).shape[0]

    @property
    def d_out(self) -> int:
        return self.n_per + (0 if self.w_n is None else self.w_n.shape[1])


@dataclass
class FANParams(FALParams):
    activation: str = dataclasses.field(default="gelu", metadata={"static": True})


def _fourier(x: Tensor, p: FALParams, act: str) -> Tensor:
    if x.shape[-1] != p.d_in:
        raise ValueError(f"expected last axis {p.d_in}, got {x.shape}")
    parts = []
    if p.w_p is not None:
        z = matmul(x, p.w_p)
        parts += [cos(z), sin(z)]
    if p.w_n is not None:
        parts.append(elementwise(act, linear(x, p.w_n, p.b_n)))
    return concat(parts, axis=-1)


def fal_forward(x: Tensor, p: FALParams) -> Tensor:
    """``[cos(x W_p) | sin(x W_p) | x W_n + b_n]`` along the last axis."""
    return _fourier(x, p, "identity")


def fan_forward(x: Tensor, p: FANParams) -> Tensor:
    """FAN layer: like FAL but with a nonlinearity on the aperiodic branch."""
    return _fourier(x, p, p.activation)


def project(x: Tensor, p) -> Tensor:
    if isinstance(p, FANParams):
        return fan_forward(x, p)
    if isinstance(p, FALParams):
        return fal_forward(x, p)
    return p(x)


@dataclass
class EmbeddingParams:
    f1: Linear
    bn1: BatchNormState
    f2: Linear
    bn2: BatchNormState

    @classmethod
    def create(cls, rng: np.random.Generator, n_bands: int, embed_dim: int, dtype=SINGLE) -> "EmbeddingParams":
        if embed_dim % 2:
            raise ValueError("embed_dim must be even")
        half = embed_dim // 2
        return cls(
            Linear.create(rng, n_bands, half, dtype=dtype),
            BatchNormState.create(half, dtype),
            Linear.create(rng, half, embed_dim, dtype=dtype),
            BatchNormState.create(embed_dim, dtype),
        )


@dataclass
class PositionalEmbedding:
    table: Tensor  # (C, E)
    enabled: bool = dataclasses.field(default=True, metadata={"static": True})

    @classmethod
    def create(cls, n_channels: int, embed_dim: int, enabled: bool = True, dtype=SINGLE) -> "PositionalEmbedding":
        return cls(Tensor(np.zeros((n_channels, embed_dim), dtype), requires_grad=enabled), enabled)


def embed_forward(inp: Tensor, p: EmbeddingParams, mode: str = "train", pos: PositionalEmbedding | None = None) -> Tensor:
    """relu(bn(f2(relu(bn(f1(inp)))))) per channel token, then + positions."""
    if inp.ndim != 3 or inp.shape[-1] != p.f1.d_in:
        raise ValueError(f"expected input [B, C, {p.f1.d_in}], got {inp.shape}")
    x = relu(batchnorm(p.f1(inp), p.bn1, mode))
    x = relu(batchnorm(p.f2(x), p.bn2, mode))
    if pos is not None and pos.enabled:
        x = add(x, pos.table)
    return x


# ---------------------------------------------------------------------------
# parameter-tree utilities


def _walk(obj, prefix: str) -> Iterator[tuple[str, object, str]]:
    """Yield ``(name, owner, attr)`` for every array-valued leaf in order."""
    if isinstance(obj, BatchNormState):
        for attr in ("weight", "bias", "running_mean", "running_var"):
            yield f"{prefix}{attr}", obj, attr
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            val = getattr(obj, f.name)
            if isinstance(val, Tensor):
                yield f"{prefix}{f.name}", obj, f.name
            elif val is not None:
                yield from _walk(val, f"{prefix}{f.name}.")
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}{i}.")


def named_parameters(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Trainable tensors in declaration order."""
    out = []
    for name, owner, attr in _walk(obj, prefix):
        val = getattr(owner, attr)
        if isinstance(val, Tensor) and val.requires_grad:
            out.append((name, val))
    return out


def parameters(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def state_arrays(obj) -> list[tuple[str, np.ndarray]]:
    """Every tensor and running buffer (trainable or not) in declaration order."""
    out = []
    for name, owner, attr in _walk(obj, ""):
        val = getattr(owner, attr)
        out.append((name, val.data if isinstance(val, Tensor) else val))
    return out


def load_state_arrays(obj, arrays: list[np.ndarray]) -> None:
    slots = list(_walk(obj, ""))
    if len(slots) != len(arrays):
        raise ValueError(f"expected {len(slots)} arrays, got {len(arrays)}")
    for (name, owner, attr), arr in zip(slots, arrays):
        cur = getattr(owner, attr)
        ref = cur.data if isinstance(cur, Tensor) else cur
        if ref.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name}: {ref.shape} vs {arr.shape}")
        arr = np.array(arr, dtype=ref.dtype)
        if isinstance(cur, Tensor):
            cur.data = arr
        else:
            setattr(owner, attr, arr)


def cast(obj, dtype) -> None:
    """Convert every tensor and buffer in place (e.g. to float64 for gradcheck)."""
    for _, owner, attr in _walk(obj, ""):
        cur = getattr(owner, attr)
        if isinstance(cur, Tensor):
            cur.data = cur.data.astype(dtype)
        else:
            setattr(owner, attr, cur.astype(dtype))
