"""Grow-then-evict KV cache state machine.

Every layer keeps an ordered list of alive entries tagged with the global
token index they were produced at. Once the cache holds ``cadence`` tokens an
eviction round fires, and after that one fires every ``cadence`` new tokens.
A round partitions the eviction candidates of each layer into contiguous
blocks, keeps ``keep_count`` of them, and drops the rest for good. The
``window`` most recent entries are the scoring queries of the round and are
never candidates themselves.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np


class CacheStateError(RuntimeError):
    """The cache state is internally inconsistent."""


@dataclass(frozen=True)
class EvictionConfig:
    cadence: int = 256
    rate: float = 0.5
    block_size: int = 32
    window: int = 5
    n_layers: int = 1

    def __post_init__(self):
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"eviction rate must lie in [0, 1], got {self.rate}")
        if not 1 <= self.block_size <= self.cadence:
            raise ValueError("block size must satisfy 1 <= b <= cadence")
        if not 0 <= self.window < self.cadence:
            raise ValueError("scoring window must satisfy 0 <= w < cadence")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    def with_rate(self, rate: float) -> EvictionConfig:
        return EvictionConfig(self.cadence, rate, self.block_size, self.window, self.n_layers)


@dataclass
class LayerCache:
    """Alive entries of one layer. keys/values are (n, H, d_h)."""

    index: np.ndarray
    keys: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.index)


@dataclass
class CacheState:
    layers: list[LayerCache]
    tokens_seen_total: int = 0
    tokens_since_round: int = 0
    rounds_fired: int = 0
    peak_entries_per_layer: int = 0

    @classmethod
    def empty(cls, n_layers: int, n_heads: int, d_head: int) -> CacheState:
        layers = [
            LayerCache(
                np.zeros(0, dtype=np.int64),
                np.zeros((0, n_heads, d_head)),
                np.zeros((0, n_heads, d_head)),
            )
            for _ in range(n_layers)
        ]
        return cls(layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def alive_counts(self) -> list[int]:
        return [len(layer) for layer in self.layers]

    def total_entries(self) -> int:
        return sum(self.alive_counts())

    def check(self) -> None:
        for li, layer in enumerate(self.layers):
            n = len(layer.index)
            if layer.keys.shape[0] != n or layer.values.shape[0] != n:
                raise CacheStateError(f"layer {li}: index/key/value lengths differ")
            if n > 1 and not np.all(np.diff(layer.index) > 0):
                raise CacheStateError(f"layer {li}: alive indices not strictly increasing")

    def append(self, keys: list[np.ndarray], values: list[np.ndarray]) -> None:
        """Add one token's per-layer K/V (each (H, d_h)) at the next global index."""
        if len(keys) != self.n_layers or len(values) != self.n_layers:
            raise CacheStateError("append needs one key/value per layer")
        pos = self.tokens_seen_total
        for layer, k, v in zip(self.layers, keys, values):
            layer.index = np.append(layer.index, pos)
            layer.keys = np.concatenate([layer.keys, k[None]], axis=0)
            layer.values = np.concatenate([layer.values, v[None]], axis=0)
        self.tokens_seen_total += 1
        self.tokens_since_round += 1
        self.peak_entries_per_layer = max(self.peak_entries_per_layer, max(self.alive_counts()))


def should_fire(state: CacheState, config: EvictionConfig) -> bool:
    if state.rounds_fired == 0:
        return state.tokens_seen_total >= config.cadence
    return state.tokens_since_round >= config.cadence


def partition_blocks(alive_count: int, block_size: int) -> list[tuple[int, int]]:
    """Contiguous ``(start, stop)`` slices of the current alive order.

    The last block is short when ``block_size`` does not divide the count.
    """
    if alive_count < 1:
        raise ValueError("cannot partition an empty candidate set")
    if block_size < 1:
        raise ValueError("block size must be >= 1")
    return [(s, min(s + block_size, alive_count)) for s in range(0, alive_count, block_size)]


def block_sizes(partition: Iterable[tuple[int, int]]) -> list[int]:
    return [stop - start for start, stop in partition]


def keep_count(n_blocks: int, rate: float) -> int:
    """Blocks kept per round: max(1, round_half_up((1 - rate) * n_blocks))."""
    if n_blocks < 1:
        raise ValueError("need at least one block")
    # guard float noise such as (1 - 0.7) * 5 = 1.4999999999999998
    x = round((1.0 - rate) * n_blocks, 9)
    return max(1, min(n_blocks, int(math.floor(x + 0.5))))


def candidate_count(alive: int, window: int) -> int:
    """Entries eligible for eviction: everything but the scoring window."""
    return max(alive - window, 0)


@dataclass
class RoundRecord:
    """One layer's decision at one eviction round.

    ``alive_indices`` is the full alive list when the round fired; the first
    ``sum(block_sizes)`` of them were candidates, the remainder (the scoring
    window) survive unconditionally. ``kept_blocks`` is the ordered draw.
    """

    layer: int
    round: int
    alive_indices: list[int]
    block_sizes: list[int]
    kept_blocks: list[int]
    logprob: float

    @property
    def position(self) -> int:
        # the newest token is always alive when a round fires
        return self.alive_indices[-1] + 1

    def kept_indices(self) -> list[int]:
        starts = np.concatenate([[0], np.cumsum(self.block_sizes)])
        kept: list[int] = []
        for j in sorted(self.kept_blocks):
            kept.extend(self.alive_indices[starts[j] : starts[j + 1]])
        kept.extend(self.alive_indices[int(starts[-1]) :])
        return kept

    def to_json(self) -> str:
        return json.dumps(
            {
                "layer": self.layer,
                "round": self.round,
                "alive_indices": list(map(int, self.alive_indices)),
                "block_sizes": list(map(int, self.block_sizes)),
                "kept_blocks": list(map(int, self.kept_blocks)),
                "logprob": float(self.logprob),
            }
        )


@dataclass
class RetentionLog:
    n_layers: int
    records: list[RoundRecord] = field(default_factory=list)

    def append(self, record: RoundRecord) -> None:
        self.records.append(record)

    def layer_rounds(self, layer: int) -> list[RoundRecord]:
        return sorted((r for r in self.records if r.layer == layer), key=lambda r: r.round)

    @property
    def n_rounds(self) -> int:
        return 1 + max((r.round for r in self.records), default=-1)

    def dump(self, fh: IO[str]) -> None:
        for rec in self.records:
            fh.write(rec.to_json() + "\n")

    @classmethod
    def load(cls, fh: IO[str], n_layers: int) -> RetentionLog:
        log = cls(n_layers)
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            log.append(
                RoundRecord(
                    d["layer"], d["round"], d["alive_indices"], d["block_sizes"], d["kept_blocks"], d["logprob"]
                )
            )
        return log


def apply_retention(state: CacheState, layer: int, partition, kept_blocks, window: int = 0) -> None:
    """Shrink ``layer`` to the kept candidate blocks plus the last ``window`` entries."""
    kept_blocks = [int(j) for j in kept_blocks]
    n_blocks = len(partition)
    if not kept_blocks:
        raise ValueError("at least one block must be kept")
    if len(set(kept_blocks)) != len(kept_blocks):
        raise ValueError(f"duplicate block ids in {kept_blocks}")
    if min(kept_blocks) < 0 or max(kept_blocks) >= n_blocks:
        raise ValueError(f"block id out of range for {n_blocks} blocks: {kept_blocks}")
    lc = state.layers[layer]
    n_cand = partition[-1][1]
    if n_cand + window != len(lc):
        raise CacheStateError(f"layer {layer}: partition covers {n_cand}+{window} of {len(lc)} entries")
    rows = [np.arange(*partition[j]) for j in sorted(kept_blocks)]
    rows.append(np.arange(n_cand, len(lc)))
    keep = np.concatenate(rows)
    lc.index = lc.index[keep]
    lc.keys = lc.keys[keep]
    lc.values = lc.values[keep]


def finish_round(state: CacheState, block_size: int | None = None) -> None:
    """Close a round. Layers keep the same number of blocks, so their alive
    counts can differ only through the one partial block, i.e. by less than b."""
    counts = state.alive_counts()
    spread = max(counts) - min(counts)
    if block_size is None and spread:
        raise CacheStateError(f"layers disagree on alive count after a round: {counts}")
    if block_size is not None and spread >= block_size:
        raise CacheStateError(f"alive counts drifted by a full block or more: {counts}")
    state.rounds_fired += 1
    state.tokens_since_round = 0


def steady_state_size(cadence: int, rate: float, n_layers: int = 1) -> float:
    """Fixed point of c <- (1 - rate) c + cadence, summed over layers."""
    if rate <= 0:
        raise ValueError("eviction rate must be positive for a bounded cache")
    if rate > 1:
        raise ValueError("eviction rate must be at most 1")
    return n_layers * cadence / rate


def kept_after_round(alive: int, rate: float, block_size: int, window: int = 0) -> int:
    """Entries left after one round, keeping full blocks ahead of the short tail block."""
    cand = candidate_count(alive, window)
    if cand < 1:
        return alive
    sizes = block_sizes(partition_blocks(cand, block_size))
    k = keep_count(len(sizes), rate)
    return sum(sorted(sizes, reverse=True)[:k]) + (alive - cand)


def pre_round_sizes(cadence: int, rate: float, block_size: int, rounds: int, window: int = 0) -> list[int]:
    """Per-layer cache size right before each of ``rounds`` eviction rounds."""
    sizes = []
    c = cadence
    for _ in range(rounds):
        sizes.append(c)
        c = kept_after_round(c, rate, block_size, window) + cadence
    return sizes


def peak_occupancy(
    prompt_len: int,
    completion_len: int,
    rate: float,
    cadence: int,
    block_size: int,
    n_layers: int = 1,
    window: int = 0,
) -> int:
    """Largest number of KV entries (all layers) held while caching p + c tokens.

    Rounds fire right before a token is appended, under the same rule as
    ``should_fire``. ``rate == 0`` never evicts.
    """
    total = prompt_len + completion_len
    alive = 0
    peak = 0
    seen = 0
    since = 0
    fired = 0
    for _ in range(total):
        due = seen >= cadence if fired == 0 else since >= cadence
        if due and rate > 0:
            alive = kept_after_round(alive, rate, block_size, window)
            fired += 1
            since = 0
        alive += 1
        seen += 1
        since += 1
        peak = max(peak, alive)
    return n_layers * peak
