"""Small reverse-mode autodiff engine on top of numpy.

Operations executed while a :class:`Tape` is active (and touching at least
one tensor with ``requires_grad``) are recorded in order; ``Tape.backward``
replays them in reverse. Outside a tape nothing is recorded, which is how
inference runs.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

SINGLE = np.float32
DOUBLE = np.float64

_local = threading.local()
# op name -> factor applied to that op's input gradients; test hook only
_GRAD_FAULTS: dict[str, float] = {}


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN/Inf from finite inputs."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by ``(seed, *stream)``.

    PCG64 plus SeedSequence hashing is fully specified by numpy and gives the
    same stream on every platform. Extra integers derive independent streams
    (e.g. one per fold) without consuming the parent.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), *stream])))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (SINGLE, DOUBLE):
            arr = arr.astype(SINGLE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "double" if self.data.dtype == DOUBLE else "single"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager around the forward pass, then call
    :meth:`backward` on the scalar loss exactly once.
    """

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if self.consumed:
            raise RuntimeError("backward already ran on this tape; run a new forward first")
        self.consumed = True
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward without explicit grad requires a scalar loss")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # what remains belongs to leaves (tensors not produced on this tape)
        self._flush(grads)
        self.records.clear()

    def _flush(self, grads: dict[int, np.ndarray]) -> None:
        for t in self._leaves:
            g = grads.get(id(t))
            if g is None:
                continue
            t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g

    @property
    def _leaves(self) -> list[Tensor]:
        produced = {id(r.out) for r in self.records}
        seen: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())


def current_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = current_tape()
    if needs and tape is not None:
        if op in _GRAD_FAULTS:
            backward = _faulty(backward, _GRAD_FAULTS[op])
        tape.records.append(_Record(out, inputs, backward))
    return out


def _faulty(backward, factor):
    return lambda g: tuple(None if gi is None else gi * factor for gi in backward(g))


@contextmanager
def inject_gradient_fault(op: str, factor: float = 1.5):
    """Deliberately scale the derivative of ``op`` (negative control for gradcheck)."""
    _GRAD_FAULTS[op] = factor
    try:
        yield
    finally:
        _GRAD_FAULTS.pop(op, None)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    return _emit(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    return _emit(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    return _emit(
        a.data / b.data,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        "div",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def sin(a: Tensor) -> Tensor:
    return _emit(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return _emit(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _emit(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1 + erf(x / math.sqrt(2)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    return _emit((x * cdf).astype(a.dtype), (a,), lambda g: ((g * (cdf + x * pdf)).astype(a.dtype),), "gelu")


def identity(a: Tensor) -> Tensor:
    return a


ELEMENTWISE = {
    "sin": sin,
    "cos": cos,
    "relu": relu,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "identity": identity,
    "add": add,
    "mul": mul,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    if op not in ELEMENTWISE:
        raise KeyError(f"unknown elementwise op {op!r}")
    return ELEMENTWISE[op](*args)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _emit(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _emit(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g) if _fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return _emit(a.data[idx], (a,), backward, "getitem")


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat needs at least one part")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat shape mismatch: {[q.shape for q in parts]}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward, "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# fused ops


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if np.isnan(x.data).any():
        raise NonFiniteError("softmax input contains NaN")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (x,), backward, "softmax")


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy; ``targets`` are class indices [B] or soft labels [B, K]."""
    B, K = logits.shape
    if K < 2:
        raise ValueError("cross_entropy needs at least two classes")
    t = np.asarray(targets)
    if t.ndim == 1:
        if not np.issubdtype(t.dtype, np.integer) or t.min(initial=0) < 0 or t.max(initial=0) >= K:
            raise ValueError("invalid class index in targets")
        soft = np.zeros((B, K), dtype=logits.dtype)
        soft[np.arange(B), t] = 1
    else:
        soft = t.astype(logits.dtype)
        if soft.shape != (B, K):
            raise ValueError("soft label shape must match logits")
        if not np.allclose(soft.sum(axis=1), 1, atol=1e-5):
            raise ValueError("soft labels must sum to 1 per row")
    logp = log_softmax_rows(logits)
    return scale(tsum(mul(logp, Tensor(soft))), -1.0 / B)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    """Learnable affine plus running statistics for one feature axis."""

    weight: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, n: int, dtype=SINGLE) -> "BatchNormState":
        return cls(
            Tensor(np.ones(n, dtype), requires_grad=True),
            Tensor(np.zeros(n, dtype), requires_grad=True),
            np.zeros(n, dtype),
            np.ones(n, dtype),
        )


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Normalize the last axis using statistics over all leading axes.

    For token input [B, C, d] the statistics pool batch and token axes.
    Running variance uses the unbiased estimator.
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs batch size >= 2")
        axes = tuple(range(x.ndim - 1))
        n = int(np.prod([x.shape[i] for i in axes]))
        mu = mean(x, axes, keepdims=True)
        xc = sub(x, mu)
        var = mean(mul(xc, xc), axes, keepdims=True)
        xhat = div(xc, sqrt(add(var, state.eps)))
        m = state.momentum
        bm = mu.data.reshape(-1)
        bv = var.data.reshape(-1) * (n / max(n - 1, 1))
        state.running_mean = ((1 - m) * state.running_mean + m * bm).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * bv).astype(state.running_var.dtype)
    elif mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = mul(sub(x, Tensor(state.running_mean.astype(x.dtype))), Tensor(inv.astype(x.dtype)))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return add(mul(xhat, state.weight), state.bias)


def layernorm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, -1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), -1, keepdims=True)
    return add(mul(div(xc, sqrt(add(var, eps))), weight), bias)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One in-place Adam update with L2 weight decay folded into the gradient."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("parameter list changed between steps")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = (p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h_rel: float = 1e-5, max_entries: int | None = None,
              rng: np.random.Generator | None = None, floor: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar output from the current contents of ``params``
    (all float64). Relative error per entry is
    ``|ga - gn| / max(|ga|, |gn|, floor)``; the floor keeps round-off on
    vanishing gradients from counting as error. The max over checked
    entries is returned. ``max_entries`` subsamples large parameters.
    """
    for p in params:
        if p.dtype != DOUBLE:
            raise TypeError("gradcheck requires double precision parameters")
        p.grad = None
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ValueError("gradcheck needs a scalar function")
    tape.backward(out)
    worst = 0.0
    for p in params:
        ga = p.grad if p.grad is not None else np.zeros_like(p.data)
        idxs = range(p.data.size)
        if max_entries is not None and p.data.size > max_entries:
            idxs = (rng or make_rng(0)).choice(p.data.size, max_entries, replace=False)
        flat = p.data.reshape(-1)
        for i in idxs:
            x0 = flat[i]
            h = h_rel * max(1.0, abs(x0))
            flat[i] = x0 + h
            fp = float(f().data)
            flat[i] = x0 - h
            fm = float(f().data)
            flat[i] = x0
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("non-finite value during finite differences")
            gn = (fp - fm) / (2 * h)
            a = float(ga.reshape(-1)[i])
            err = abs(a - gn) / max(abs(a), abs(gn), floor)
            worst = max(worst, err)
    return worst
