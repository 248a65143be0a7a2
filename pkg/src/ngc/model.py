"""A small pre-norm decoder-only transformer on the autograd core.

Two entry points share the same layer math:

* ``forward_masked`` runs a whole sequence with one boolean visibility mask
  per layer and keeps every activation on the graph.
* ``decode_step`` feeds one token against a ``CacheState`` and appends that
  token's keys and values to every layer.

Rotary embeddings use the global token index, so a key keeps its position
after its neighbours are evicted. That is what makes a replayed masked pass
reproduce incremental decoding exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .cache import CacheState, CacheStateError

CHECKPOINT_MAGIC = b"NGCKPT1\n"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    vocab_size: int = 64
    max_seq: int = 256
    seed: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.vocab_size < 8:
            raise ValueError("vocab_size must be >= 8")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


Params = dict[str, Tensor]


def param_names(config: ModelConfig) -> list[str]:
    names = ["embed"]
    for l in range(config.n_layers):
        names += [f"l{l}.{n}" for n in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2")]
    return names + ["final_norm", "head"]


def init_params(config: ModelConfig) -> Params:
    rng = np.random.default_rng(config.seed)
    d, v, L = config.d_model, config.vocab_size, config.n_layers
    std = 0.02
    out_std = std / np.sqrt(2 * L)
    shapes = {
        "attn_norm": ((d,), None),
        "wq": ((d, d), std),
        "wk": ((d, d), std),
        "wv": ((d, d), std),
        "wo": ((d, d), out_std),
        "mlp_norm": ((d,), None),
        "w1": ((d, 4 * d), std),
        "w2": ((4 * d, d), out_std),
    }
    params: Params = {"embed": Tensor(rng.normal(0, std, (v, d)), requires_grad=True)}
    for l in range(L):
        for name, (shape, s) in shapes.items():
            arr = np.ones(shape) if s is None else rng.normal(0, s, shape)
            params[f"l{l}.{name}"] = Tensor(arr, requires_grad=True)
    params["final_norm"] = Tensor(np.ones(d), requires_grad=True)
    params["head"] = Tensor(rng.normal(0, std, (d, v)), requires_grad=True)
    return params


def rope_tables(positions, d_head: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(positions, dtype=np.float64)
    inv = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = pos[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


@dataclass
class LayerTrace:
    """Per-layer rotated queries and keys, each (H, T, d_h) on the graph."""

    queries: list[Tensor]
    keys: list[Tensor]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = x.reshape(*lead, t, n_heads, d // n_heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(axes).reshape(*lead, t, h * dh)


def _qkv(params: Params, l: int, config: ModelConfig, x: Tensor, cos, sin):
    h = ag.rmsnorm(x, params[f"l{l}.attn_norm"])
    q = ag.rotate(_split_heads(h @ params[f"l{l}.wq"], config.n_heads), cos, sin)
    k = ag.rotate(_split_heads(h @ params[f"l{l}.wk"], config.n_heads), cos, sin)
    v = _split_heads(h @ params[f"l{l}.wv"], config.n_heads)
    return q, k, v


def _attend(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    scores = ag.scale(q @ ag.swap_last(k), 1.0 / np.sqrt(q.shape[-1]))
    return _merge_heads(ag.softmax_lastdim(scores, mask) @ v)


def _finish_layer(params: Params, l: int, x: Tensor, att: Tensor) -> Tensor:
    x = x + att @ params[f"l{l}.wo"]
    h = ag.rmsnorm(x, params[f"l{l}.mlp_norm"])
    return x + ag.gelu(h @ params[f"l{l}.w1"]) @ params[f"l{l}.w2"]


def _embed(params: Params, tokens: np.ndarray) -> Tensor:
    flat = ag.gather_rows(params["embed"], tokens.reshape(-1))
    return flat.reshape(*tokens.shape, flat.shape[-1])


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def validate_mask(mask: np.ndarray, t: int) -> None:
    if mask.shape[-2:] != (t, t):
        raise ag.ShapeError(f"mask of shape {mask.shape} for a sequence of length {t}")
    if not np.all(np.diagonal(mask, axis1=-2, axis2=-1)):
        raise ValueError("mask diagonal must be visible")
    if np.any(np.triu(mask, 1)):
        raise ValueError("mask sees future positions")


def forward_masked(params: Params, config: ModelConfig, tokens, masks=None, check: bool = True):
    """Logits for every position under per-layer masks.

    ``tokens`` is (T,) or (B, T). ``masks`` is a list with one (T, T) or
    (B, T, T) boolean array per layer; ``None`` means fully causal. Returns
    ``(logits, LayerTrace)``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    t = tokens.shape[-1]
    if t > config.max_seq:
        raise ag.ShapeError(f"sequence of {t} tokens exceeds max_seq={config.max_seq}")
    if masks is None:
        masks = [causal_mask(t)] * config.n_layers
    if len(masks) != config.n_layers:
        raise ag.ShapeError(f"{len(masks)} masks for {config.n_layers} layers")
    cos, sin = rope_tables(np.arange(t), config.d_head, config.rope_base)
    x = _embed(params, tokens)
    queries, keys = [], []
    for l in range(config.n_layers):
        mask = np.asarray(masks[l], dtype=bool)
        if check:
            validate_mask(mask, t)
        if mask.ndim == 3:
            mask = mask[:, None]
        q, k, v = _qkv(params, l, config, x, cos, sin)
        queries.append(q)
        keys.append(k)
        x = _finish_layer(params, l, x, _attend(q, k, v, mask))
    logits = ag.rmsnorm(x, params["final_norm"]) @ params["head"]
    return logits, LayerTrace(queries, keys)


@dataclass
class StepOutput:
    logits: np.ndarray
    queries: list[np.ndarray]
    keys: list[np.ndarray]
    values: list[np.ndarray]


def decode_step(params: Params, config: ModelConfig, cache: CacheState, token: int) -> StepOutput:
    """Feed one token at global position ``cache.tokens_seen_total``.

    The token attends to the alive entries of each layer plus itself; its
    keys and values are appended to ``cache`` in place.
    """
    if cache.n_layers != config.n_layers:
        raise CacheStateError(f"cache has {cache.n_layers} layers, model has {config.n_layers}")
    cache.check()
    pos = cache.tokens_seen_total
    if pos >= config.max_seq:
        raise ag.ShapeError(f"position {pos} exceeds max_seq={config.max_seq}")
    cos, sin = rope_tables([pos], config.d_head, config.rope_base)
    out_q, out_k, out_v = [], [], []
    with ag.no_grad():
        x = _embed(params, np.array([token], dtype=np.int64))
        for l in range(config.n_layers):
            q, k, v = _qkv(params, l, config, x, cos, sin)
            lc = cache.layers[l]
            k_all = ag.concat([Tensor(lc.keys.transpose(1, 0, 2)), k], axis=1)
            v_all = ag.concat([Tensor(lc.values.transpose(1, 0, 2)), v], axis=1)
            x = _finish_layer(params, l, x, _attend(q, k_all, v_all, None))
            out_q.append(q.values[:, 0, :])
            out_k.append(k.values[:, 0, :])
            out_v.append(v.values[:, 0, :])
        logits = ag.rmsnorm(x, params["final_norm"]) @ params["head"]
    cache.append(out_k, out_v)
    return StepOutput(logits.values[0], out_q, out_k, out_v)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, params: Params, config: ModelConfig, extra: dict | None = None) -> None:
    """Write magic, u64 header length, JSON header, then float64 LE tensors."""
    names = param_names(config)
    header = {
        "config": asdict(config),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].values, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", data[off : off + 8])
    off += 8
    header = json.loads(data[off : off + n])
    off += n
    config = ModelConfig(**header["config"])
    params: Params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        params[entry["name"]] = Tensor(arr.astype(np.float64), requires_grad=True)
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    if sorted(params) != sorted(param_names(config)):
        raise ValueError(f"{path}: tensor table does not match the config")
    return params, config, header.get("extra", {})


def copy_params(params: Params) -> Params:
    return {k: Tensor(v.values.copy(), requires_grad=True) for k, v in params.items()}
