"""Generation under grow-then-evict dynamics.

The prompt is fed token by token, then tokens are sampled until EOS or the
length cap. Before each token is fed the cache checks whether a round is
due; if so every layer scores its candidates, keeps ``keep_count`` blocks
and logs the decision. The final sampled token is never fed, so no round
fires after the last token.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cache import (
    CacheState,
    EvictionConfig,
    RetentionLog,
    RoundRecord,
    apply_retention,
    block_sizes,
    candidate_count,
    finish_round,
    keep_count,
    partition_blocks,
    should_fire,
)
from .model import ModelConfig, Params, decode_step
from .sampling import greedy_topk, gumbel_topk, round_rng, sequence_logprob
from .scoring import ScorerKind, baseline_keep_set, ngc_block_scores

NGC = ScorerKind("ngc")


@dataclass
class Trajectory:
    tokens: list[int]
    prompt_len: int
    log: RetentionLog
    rate: float
    peak_entries: int
    reward: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def completion(self) -> list[int]:
        return self.tokens[self.prompt_len :]

    def __len__(self) -> int:
        return len(self.tokens)


def force_meta_token(logits: np.ndarray, token_id: int) -> np.ndarray:
    """Logits that put all probability on ``token_id``."""
    if not 0 <= token_id < len(logits):
        raise ValueError(f"token id {token_id} outside vocabulary of {len(logits)}")
    out = np.full_like(logits, -np.inf)
    out[token_id] = 0.0
    return out


def sample_token(logits: np.ndarray, rng: np.random.Generator, temperature: float = 1.0) -> int:
    if temperature <= 0:
        return int(np.argmax(logits))
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def fire_after_next(cache: CacheState, ecfg: EvictionConfig) -> bool:
    """Would a round be due right after one more token is fed?"""
    if cache.rounds_fired == 0:
        return cache.tokens_seen_total + 1 >= ecfg.cadence
    return cache.tokens_since_round + 1 >= ecfg.cadence


def eviction_round(
    cache: CacheState,
    ecfg: EvictionConfig,
    windows: list[deque],
    log: RetentionLog,
    scorer: ScorerKind = NGC,
    *,
    greedy: bool = False,
    seed: int = 0,
    trajectory: int = 0,
) -> None:
    """Score, select and evict in every layer; append one record per layer."""
    rnd = cache.rounds_fired
    w = ecfg.window
    partitions = [partition_blocks(candidate_count(len(lc), w), ecfg.block_size) for lc in cache.layers]
    # one K for every layer, sized for the layer with the fewest blocks
    k = keep_count(min(len(p) for p in partitions), ecfg.rate)
    for layer, lc in enumerate(cache.layers):
        partition = partitions[layer]
        n_cand = partition[-1][1]
        keys = lc.keys[:n_cand]
        queries = np.stack(list(windows[layer]), axis=1) if w else None
        if scorer.sampled:
            s = ngc_block_scores(queries, keys.transpose(1, 0, 2), partition).values
            if greedy:
                order = greedy_topk(s, k)
                lp = float(sequence_logprob(s, order).values)
            else:
                draw = gumbel_topk(s, k, round_rng(seed, trajectory, layer, rnd))
                order, lp = draw.order, draw.logprob
        else:
            order = baseline_keep_set(scorer, k, partition, keys=keys, queries=queries)
            lp = 0.0
        log.append(RoundRecord(layer, rnd, lc.index.tolist(), block_sizes(partition), list(order), lp))
        apply_retention(cache, layer, partition, order, window=w)
    finish_round(cache, ecfg.block_size)


def generate(
    params: Params,
    config: ModelConfig,
    prompt,
    ecfg: EvictionConfig,
    *,
    max_new: int,
    eos_id: int,
    scorer: ScorerKind = NGC,
    greedy_evict: bool = False,
    temperature: float = 1.0,
    seed: int = 0,
    trajectory: int = 0,
    meta_token: int | None = None,
    return_logits: bool = False,
) -> Trajectory:
    """Roll out one completion; ``ecfg.rate == 0`` disables eviction."""
    prompt = [int(t) for t in prompt]
    if len(prompt) >= ecfg.cadence and ecfg.rate > 0:
        raise ValueError(f"prompt of {len(prompt)} tokens must be shorter than the cadence {ecfg.cadence}")
    cache = CacheState.empty(config.n_layers, config.n_heads, config.d_head)
    windows = [deque(maxlen=max(ecfg.window, 1)) for _ in range(config.n_layers)]
    log = RetentionLog(config.n_layers)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, trajectory, 0x70C])
    tokens: list[int] = []
    step_logits = []
    evicting = ecfg.rate > 0

    def feed(tok: int) -> np.ndarray:
        if evicting and tokens and should_fire(cache, ecfg):
            eviction_round(
                cache, ecfg, windows, log, scorer, greedy=greedy_evict, seed=seed, trajectory=trajectory
            )
        out = decode_step(params, config, cache, tok)
        for layer in range(config.n_layers):
            windows[layer].append(out.queries[layer])
        tokens.append(tok)
        return out.logits

    logits = None
    for tok in prompt:
        logits = feed(tok)
    for i in range(max_new):
        if meta_token is not None and evicting and fire_after_next(cache, ecfg):
            nxt = int(np.argmax(force_meta_token(logits, meta_token)))
        else:
            nxt = sample_token(logits, rng, temperature)
        if return_logits:
            step_logits.append(logits)
        if nxt == eos_id or i == max_new - 1:
            tokens.append(nxt)
            break
        logits = feed(nxt)
    traj = Trajectory(tokens, len(prompt), log, ecfg.rate, cache.peak_entries_per_layer * config.n_layers)
    if return_logits:
        traj.meta["logits"] = np.array(step_logits)
    return traj
