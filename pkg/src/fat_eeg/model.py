"""Full transformer over channel tokens, its config, and checkpoint I/O."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import (
    AdjacencyPair,
    AttentionComponents,
    FAAParams,
    HeadPartition,
    MHSAParams,
    faa_forward,
    mhsa_forward,
)
from .autodiff import SINGLE, Tensor, add, dropout, layernorm, make_rng, mean, relu
from .layers import (
    EmbeddingParams,
    Linear,
    PositionalEmbedding,
    embed_forward,
    load_state_arrays,
    param,
    parameters,
    state_arrays,
)

QKV_LAYERS = ("fal", "fan", "linear")
CHECKPOINT_MAGIC = b"FATCKPT1"


@dataclass
class FATConfig:
    embed_dim: int = 256
    heads: int = 8
    depth: int = 6
    p_ratio: float = 0.25
    use_adjacency: bool = True
    n_channels: int = 62
    n_bands: int = 5
    n_classes: int = 3
    ffn_mult: int = 4
    dropout: float = 0.1
    qkv_layer: str = "fal"
    positional: bool = True
    fan_activation: str = "gelu"
    seed: int = 0

    def validate(self) -> HeadPartition:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.qkv_layer not in QKV_LAYERS:
            raise ValueError(f"qkv_layer must be one of {QKV_LAYERS}")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        part = HeadPartition.from_ratio(self.embed_dim, self.heads, self.p_ratio)
        if self.qkv_layer == "linear" and (part.n_p_heads or self.use_adjacency):
            raise ValueError("the linear (vanilla) variant requires p_ratio=0 and no adjacency")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        return part

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FATConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown FATConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Block:
    ln1_w: Tensor
    ln1_b: Tensor
    attn: FAAParams | MHSAParams
    ln2_w: Tensor
    ln2_b: Tensor
    ffn1: Linear
    ffn2: Linear


@dataclass
class FATModel:
    config: FATConfig = field(metadata={"static": True})
    embed: EmbeddingParams
    pos: PositionalEmbedding
    blocks: list[Block]
    adjacency: AdjacencyPair | None
    ln_f_w: Tensor
    ln_f_b: Tensor
    head: Linear

    @property
    def partition(self) -> HeadPartition:
        return HeadPartition.from_ratio(self.config.embed_dim, self.config.heads, self.config.p_ratio)


def build_model(cfg: FATConfig, rng: np.random.Generator | None = None, dtype=SINGLE) -> FATModel:
    """Initialise a model; with ``rng=None`` the stream comes from ``cfg.seed``."""
    part = cfg.validate()
    rng = make_rng(cfg.seed) if rng is None else rng
    E = cfg.embed_dim
    ones = lambda: param(np.ones(E, dtype))  # noqa: E731
    zeros = lambda: param(np.zeros(E, dtype))  # noqa: E731
    embed = EmbeddingParams.create(rng, cfg.n_bands, E, dtype)
    pos = PositionalEmbedding.create(cfg.n_channels, E, cfg.positional, dtype)
    blocks = []
    for _ in range(cfg.depth):
        if cfg.qkv_layer == "linear":
            attn = MHSAParams.create(rng, E, dtype)
        else:
            attn = FAAParams.create(rng, part, cfg.qkv_layer, dtype, cfg.fan_activation)
        hidden = cfg.ffn_mult * E
        blocks.append(Block(ones(), zeros(), attn, ones(), zeros(),
                            Linear.create(rng, E, hidden, dtype=dtype),
                            Linear.create(rng, hidden, E, dtype=dtype)))
    adj = AdjacencyPair.create(cfg.n_channels, dtype) if cfg.use_adjacency else None
    head = Linear.create(rng, E, cfg.n_classes, dtype=dtype)
    return FATModel(cfg, embed, pos, blocks, adj, ones(), zeros(), head)


def fat_forward(model: FATModel, inp: Tensor, mode: str = "eval", rng: np.random.Generator | None = None,
                trace: list | None = None) -> Tensor:
    """Logits [B, n_classes] for DE input [B, C, F].

    Dropout is active only when ``mode == "train"`` and an ``rng`` is given.
    ``trace`` collects one :class:`AttentionComponents` per block.
    """
    cfg = model.config
    if not isinstance(inp, Tensor):
        inp = Tensor(np.asarray(inp, dtype=model.head.weight.dtype))
    if inp.ndim != 3 or inp.shape[2] != cfg.n_bands:
        raise ValueError(f"expected input [B, C, {cfg.n_bands}], got {inp.shape}")
    if inp.shape[1] != cfg.n_channels:
        raise ValueError(f"input has {inp.shape[1]} channels, model was built for {cfg.n_channels}")
    rate = cfg.dropout if mode == "train" and rng is not None else 0.0
    part = model.partition
    x = embed_forward(inp, model.embed, mode, model.pos)
    for blk in model.blocks:
        comps = AttentionComponents() if trace is not None else None
        y = layernorm(x, blk.ln1_w, blk.ln1_b)
        if isinstance(blk.attn, MHSAParams):
            y = mhsa_forward(y, blk.attn, cfg.heads, rate, rng, comps)
        else:
            y = faa_forward(y, blk.attn, model.adjacency, part, rate, rng, comps)
        x = add(x, y)
        y = layernorm(x, blk.ln2_w, blk.ln2_b)
        y = blk.ffn2(dropout(relu(blk.ffn1(y)), rate, rng))
        x = add(x, y)
        if trace is not None:
            trace.append(comps)
    x = layernorm(x, model.ln_f_w, model.ln_f_b)
    return model.head(mean(x, axis=1))


def count_params(model: FATModel) -> int:
    return int(sum(p.data.size for p in parameters(model)))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def checkpoint_bytes(model: FATModel) -> bytes:
    """``FATCKPT1`` | u32 LE json length | config json | float32 LE state arrays."""
    header = canonical_json(model.config.to_dict()).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in state_arrays(model))
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + body


def save_checkpoint(model: FATModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> FATModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if len(raw) < 12:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<I", raw[8:12])
    try:
        cfg = FATConfig.from_dict(json.loads(raw[12 : 12 + n].decode()))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"bad checkpoint config: {e}") from e
    model = build_model(cfg)
    body = raw[12 + n :]
    shapes = [a.shape for _, a in state_arrays(model)]
    total = sum(int(np.prod(s)) for s in shapes)
    if len(body) != 4 * total:
        raise CheckpointError(f"checkpoint body holds {len(body)} bytes, expected {4 * total}")
    flat = np.frombuffer(body, dtype="<f4")
    arrays, off = [], 0
    for s in shapes:
        k = int(np.prod(s))
        arrays.append(flat[off : off + k].reshape(s).astype(SINGLE))
        off += k
    load_state_arrays(model, arrays)
    return model
