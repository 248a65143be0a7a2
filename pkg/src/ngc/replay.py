"""Replay masks: one masked forward pass that reproduces a rollout.

During a rollout each layer's cache shrinks at every eviction round. Row r
of a layer's replay mask lists the keys that layer could see when token r
was fed: the entries kept at the latest round before r, plus the tokens fed
since that round up to r itself. Feeding the whole trajectory through
``forward_masked`` with these masks gives the rollout's next-token
distributions at every position, and the same trace yields the queries and
keys needed to recompute each round's eviction log-probability on the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .cache import EvictionConfig, RetentionLog, RoundRecord, partition_blocks
from .model import ModelConfig, Params, causal_mask, forward_masked
from .sampling import sequence_logprob
from .scoring import ngc_block_scores


class ReplayConsistencyError(ValueError):
    """A retention log does not describe a reachable rollout."""


def build_replay_masks(log: RetentionLog, length: int, cadence: int | None = None) -> list[np.ndarray]:
    """Per-layer (T, T) visibility masks for a trajectory of ``length`` tokens.

    With ``cadence`` given, rounds must sit at multiples of it; otherwise
    the round positions are read from the log.
    """
    masks = []
    for layer in range(log.n_layers):
        mask = causal_mask(length)
        rounds = log.layer_rounds(layer)
        expected_alive = None
        prev_pos = 0
        for i, rec in enumerate(rounds):
            if rec.round != i:
                raise ReplayConsistencyError(f"layer {layer}: round {rec.round} out of sequence (expected {i})")
            pos = rec.position
            if pos >= length:
                raise ReplayConsistencyError(f"layer {layer}, round {i}: fires at {pos} beyond length {length}")
            if cadence is not None and pos != cadence * (i + 1):
                raise ReplayConsistencyError(
                    f"layer {layer}, round {i}: fires at {pos}, cadence {cadence} expects {cadence * (i + 1)}"
                )
            alive = list(range(prev_pos, pos)) if expected_alive is None else expected_alive + list(range(prev_pos, pos))
            if list(rec.alive_indices) != alive:
                raise ReplayConsistencyError(f"layer {layer}, round {i}: alive set does not follow from earlier rounds")
            if sum(rec.block_sizes) > len(alive) or any(b < 1 for b in rec.block_sizes):
                raise ReplayConsistencyError(f"layer {layer}, round {i}: bad block sizes {rec.block_sizes}")
            n_blocks = len(rec.block_sizes)
            if not rec.kept_blocks or any(j < 0 or j >= n_blocks for j in rec.kept_blocks):
                raise ReplayConsistencyError(f"layer {layer}, round {i}: bad kept blocks {rec.kept_blocks}")
            kept = rec.kept_indices()
            stop = rounds[i + 1].position if i + 1 < len(rounds) else length
            if stop <= pos:
                raise ReplayConsistencyError(f"layer {layer}, round {i + 1}: not after round {i}")
            visible = np.zeros(pos, dtype=bool)
            visible[kept] = True
            mask[pos:stop, :pos] = visible
            expected_alive = kept
            prev_pos = pos
        np.fill_diagonal(mask, True)
        masks.append(mask)
    return masks


def demo_retention_log(n_layers: int = 1) -> tuple[RetentionLog, int]:
    """Ten tokens, single-token blocks, no scoring window.

    Round 0 fires after t4 and evicts t1 and t3; round 1 fires after t7 and
    evicts t2 and t5. Every layer makes the same choice. Returns the log and
    the sequence length.
    """
    log = RetentionLog(n_layers)
    for layer in range(n_layers):
        log.append(RoundRecord(layer, 0, [0, 1, 2, 3, 4], [1] * 5, [0, 2, 4], 0.0))
        log.append(RoundRecord(layer, 1, [0, 2, 4, 5, 6, 7], [1] * 6, [0, 2, 4, 5], 0.0))
    return log, 10


def visible_sets(mask: np.ndarray) -> list[list[int]]:
    """Sparse per-row form of a mask."""
    return [np.flatnonzero(row).tolist() for row in mask]


def mask_to_pbm(mask: np.ndarray) -> str:
    """Plain PBM (P1) text, 1 = visible."""
    rows = [" ".join("1" if v else "0" for v in row) for row in mask]
    return f"P1\n{mask.shape[1]} {mask.shape[0]}\n" + "\n".join(rows) + "\n"


def mask_to_grid(mask: np.ndarray, visible: str = "#", hidden: str = ".") -> str:
    return "\n".join("".join(visible if v else hidden for v in row) for row in mask)


def is_key_side_representable(mask: np.ndarray) -> bool:
    """True when every key, once visible, stays visible for all later rows."""
    t = mask.shape[0]
    for j in range(t):
        col = mask[j:, j]
        if not col.all():
            return False
    return True


@dataclass
class ReplayResult:
    token_logprobs: Tensor
    round_logprobs: list[list[Tensor]] = field(default_factory=list)
    logits: Tensor | None = None


def _round_logprobs(trace_q, trace_k, log, ecfg, check_tol):
    """Recompute every round's eviction log-probability from the live trace."""
    w = ecfg.window
    out = []
    for layer in range(log.n_layers):
        per_round = []
        for rec in log.layer_rounds(layer):
            pos = rec.position
            n_cand = sum(rec.block_sizes)
            tail = rec.alive_indices[n_cand:]
            if len(tail) != w or list(tail) != list(range(pos - w, pos)):
                raise ReplayConsistencyError(
                    f"layer {layer}, round {rec.round}: scoring window {tail} is not the last {w} tokens"
                )
            if rec.block_sizes != [b - a for a, b in partition_blocks(n_cand, ecfg.block_size)]:
                raise ReplayConsistencyError(f"layer {layer}, round {rec.round}: partition differs from block size")
            cand = np.asarray(rec.alive_indices[:n_cand])
            q = trace_q[layer]
            k = trace_k[layer]
            queries = q[:, pos - w : pos, :]
            keys = k[:, cand, :]
            partition = partition_blocks(n_cand, ecfg.block_size)
            s = ngc_block_scores(queries, keys, partition)
            lp = sequence_logprob(s, rec.kept_blocks)
            if check_tol is not None and abs(lp.item() - rec.logprob) > check_tol:
                raise ReplayConsistencyError(
                    f"layer {layer}, round {rec.round}: recomputed logprob {lp.item():.12g} "
                    f"!= rollout {rec.logprob:.12g}"
                )
            per_round.append(lp)
        out.append(per_round)
    return out


def _tempered_logprobs(logits: Tensor, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ValueError("replay needs a positive sampling temperature")
    return ag.log_softmax_lastdim(logits if temperature == 1.0 else ag.scale(logits, 1.0 / temperature))


def replay_forward(
    params: Params,
    config: ModelConfig,
    tokens,
    log: RetentionLog,
    prompt_len: int,
    ecfg: EvictionConfig,
    *,
    masks=None,
    with_rounds: bool = True,
    check_tol: float | None = 1e-6,
    temperature: float = 1.0,
) -> ReplayResult:
    """Token log-probabilities of ``tokens[prompt_len:]`` plus round log-probs.

    ``masks`` overrides the replay masks (a causal list reproduces the
    off-policy scoring used by the targeted-dropout ablation). Token
    log-probs are taken under the sampling ``temperature``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    t = len(tokens)
    if masks is None:
        masks = build_replay_masks(log, t)
    logits, trace = forward_masked(params, config, tokens, masks)
    logp = _tempered_logprobs(logits, temperature)
    pos = np.arange(prompt_len - 1, t - 1)
    token_lp = ag.pick_lastdim(logp[prompt_len - 1 : t - 1], tokens[pos + 1])
    rounds = _round_logprobs(trace.queries, trace.keys, log, ecfg, check_tol) if with_rounds else []
    return ReplayResult(token_lp, rounds, logits)


def replay_batch(
    params: Params,
    config: ModelConfig,
    items,
    ecfg: EvictionConfig,
    *,
    causal: bool = False,
    with_rounds: bool = True,
    check_tol: float | None = 1e-6,
    pad_id: int = 0,
    temperature: float = 1.0,
) -> list[ReplayResult]:
    """Replay several trajectories in one padded forward pass.

    ``items`` holds ``(tokens, log, prompt_len)`` triples. Padding sits after
    each sequence's end, so causal visibility keeps it from affecting the
    real positions.
    """
    lengths = [len(tok) for tok, _, _ in items]
    t = max(lengths)
    b = len(items)
    tokens = np.full((b, t), pad_id, dtype=np.int64)
    masks = np.zeros((config.n_layers, b, t, t), dtype=bool)
    for i, (tok, log, _) in enumerate(items):
        n = len(tok)
        tokens[i, :n] = tok
        layer_masks = [causal_mask(n)] * config.n_layers if causal else build_replay_masks(log, n)
        for l in range(config.n_layers):
            masks[l, i] = causal_mask(t)
            masks[l, i, :n, :n] = layer_masks[l]
    logits, trace = forward_masked(params, config, tokens, list(masks), check=False)
    logp = _tempered_logprobs(logits, temperature)
    results = []
    for i, (tok, log, prompt_len) in enumerate(items):
        n = lengths[i]
        rows = np.arange(prompt_len - 1, n - 1)
        lp = logp[i, prompt_len - 1 : n - 1]
        token_lp = ag.pick_lastdim(lp, np.asarray(tok)[rows + 1])
        rounds = []
        if with_rounds and log.records:
            qs = [q[i] for q in trace.queries]
            ks = [k[i] for k in trace.keys]
            rounds = _round_logprobs(qs, ks, log, ecfg, check_tol)
        results.append(ReplayResult(token_lp, rounds))
    return results
