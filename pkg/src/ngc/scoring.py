"""Block scores for eviction rounds.

The learned policy scores each candidate key by the attention mass it gets
from the most recent queries, averaged over heads and queries, and then
averages those per-key scores within each block. The same code runs on
plain arrays during rollouts and on graph tensors during replay, so the
recomputed scores are differentiable.

The baselines are block-level re-implementations of published heuristics,
not their reference code:

* ``streaming``: attention sinks plus a recency window (StreamingLLM).
* ``snap``: the same attention scores, greedy, on a model never trained to
  evict (SnapKV).
* ``knorm``: prefer keys with small L2 norm (KNorm).
* ``keydiff``: prefer blocks whose mean key is least similar to the other
  blocks' mean keys (KeyDiff).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

NEG_SENTINEL = -1e30

SCORER_KINDS = ("ngc", "streaming", "snap", "knorm", "keydiff")


def ngc_key_scores(queries, keys, valid=None):
    """Mean attention weight each candidate key receives.

    ``queries`` is (H, w, d_h) and ``keys`` is (H, n, d_h); either may be a
    ``Tensor`` (result stays on the graph) or an array. ``valid`` masks keys
    out of the softmax entirely. Returns a length-n vector summing to 1 over
    valid keys.
    """
    q, k = ag.as_tensor(queries), ag.as_tensor(keys)
    if k.shape[1] == 0:
        raise ValueError("no candidate keys to score")
    h, w, dh = q.shape
    scores = ag.scale(q @ ag.swap_last(k), 1.0 / np.sqrt(dh))
    mask = None if valid is None else np.asarray(valid, dtype=bool)[None, None, :]
    attn = ag.softmax_lastdim(scores, mask)
    return ag.scale(attn.reshape(h * w, k.shape[1]).sum(axis=0), 1.0 / (h * w))


def aggregate_blocks(psi, partition, valid=None):
    """Masked mean of ``psi`` within each ``(start, stop)`` block.

    A block without valid keys gets ``NEG_SENTINEL`` so it is never drawn.
    """
    psi = ag.as_tensor(psi)
    n = psi.shape[0]
    m = np.ones(n) if valid is None else np.asarray(valid, dtype=np.float64)
    if partition[-1][1] != n:
        raise ValueError(f"partition covers {partition[-1][1]} keys, scores cover {n}")
    # (N, n) averaging matrix keeps this one matmul on the graph
    weights = np.zeros((len(partition), n))
    sentinel = np.zeros(len(partition))
    for j, (a, b) in enumerate(partition):
        mass = m[a:b].sum()
        if mass > 0:
            weights[j, a:b] = m[a:b] / mass
        else:
            sentinel[j] = NEG_SENTINEL
    s = (Tensor(weights) @ psi.reshape(n, 1)).reshape(len(partition))
    if sentinel.any():
        s = s + Tensor(sentinel)
    return s


def ngc_block_scores(queries, keys, partition, valid=None):
    return aggregate_blocks(ngc_key_scores(queries, keys, valid), partition, valid)


@dataclass(frozen=True)
class ScorerKind:
    name: str = "ngc"
    n_sink: int = 4

    def __post_init__(self):
        if self.name not in SCORER_KINDS:
            raise ValueError(f"unknown scorer {self.name!r}; expected one of {SCORER_KINDS}")
        if self.n_sink < 0:
            raise ValueError("scorer parameters must be nonnegative")

    @classmethod
    def parse(cls, text: str) -> ScorerKind:
        """``name`` or ``name:key=val,...``, e.g. ``streaming:n_sink=4``."""
        name, _, rest = text.partition(":")
        kwargs = {}
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            kwargs[key.strip()] = int(val)
        return cls(name.strip(), **kwargs)

    @property
    def sampled(self) -> bool:
        return self.name == "ngc"


def _topk_ids(scores: np.ndarray, k: int) -> list[int]:
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return order[:k]


def streaming_keep(partition, k: int, n_sink: int = 4) -> list[int]:
    """Sink blocks covering the first ``n_sink`` tokens, then newest blocks.

    Positions are alive-order offsets; keeping newest-first means the middle
    is dropped oldest-first.
    """
    n = len(partition)
    if k > n:
        raise ValueError(f"cannot keep {k} of {n} blocks")
    sinks = [j for j, (a, _) in enumerate(partition) if a < n_sink][:k]
    rest = [j for j in range(n - 1, -1, -1) if j not in sinks]
    return sinks + rest[: k - len(sinks)]


def knorm_block_scores(keys: np.ndarray, partition) -> np.ndarray:
    """Negative mean key L2 norm per block; ``keys`` is (n, H, d_h)."""
    norms = np.linalg.norm(keys.reshape(keys.shape[0], -1), axis=1)
    return np.array([-norms[a:b].mean() for a, b in partition])


def keydiff_block_scores(keys: np.ndarray, partition) -> np.ndarray:
    """Negative max cosine similarity of each block's mean key to the others."""
    flat = keys.reshape(keys.shape[0], -1)
    means = np.stack([flat[a:b].mean(axis=0) for a, b in partition])
    norms = np.linalg.norm(means, axis=1)
    unit = means / np.where(norms > 0, norms, 1.0)[:, None]
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    if len(partition) == 1:
        return np.zeros(1)
    return -sim.max(axis=1)


def baseline_keep_set(kind: ScorerKind, k: int, partition, keys=None, queries=None) -> list[int]:
    """Deterministic kept-block ids for a heuristic scorer.

    ``keys`` is (n, H, d_h) over candidates; ``queries`` is (H, w, d_h).
    """
    n = len(partition)
    if k > n:
        raise ValueError(f"cannot keep {k} of {n} blocks")
    if kind.name == "streaming":
        return streaming_keep(partition, k, kind.n_sink)
    if kind.name == "knorm":
        return _topk_ids(knorm_block_scores(keys, partition), k)
    if kind.name == "keydiff":
        return _topk_ids(keydiff_block_scores(keys, partition), k)
    if kind.name in ("snap", "ngc"):
        s = ngc_block_scores(queries, keys.transpose(1, 0, 2), partition)
        return _topk_ids(s.values, k)
    raise ValueError(f"unknown scorer {kind.name!r}")
