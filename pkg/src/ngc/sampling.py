"""Ordered subset sampling over block scores.

``gumbel_topk`` perturbs every block logit with independent Gumbel noise
and keeps the K largest, which is the same distribution as drawing K
blocks one at a time without replacement from the softmax. The probability
of the ordered draw is the product of those sequential softmax terms;
``sequence_logprob`` evaluates it with a single logsumexp and a running
log-mass that is reduced by each chosen block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

# log1p(-f) amplifies the rounding in Z by 1/(1-f); recompute once f reaches
# one half so that amplification never exceeds a factor of two
CANCELLATION_GUARD = 0.5
_U_EPS = 1e-12


class DrawError(ValueError):
    """The requested draw is impossible for the given scores."""


@dataclass
class SubsetDraw:
    order: list[int]
    logprob: float


def round_rng(seed: int, trajectory: int, layer: int, round_: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, trajectory, layer, round)."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, trajectory, layer, round_])
    return np.random.Generator(np.random.Philox(ss))


def gumbel_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    u = np.clip(rng.random(n), _U_EPS, 1.0 - _U_EPS)
    return -np.log(-np.log(u))


def _finite_count(s: np.ndarray) -> int:
    return int(np.sum(s > -1e29))


def gumbel_topk(scores, k: int, rng: np.random.Generator) -> SubsetDraw:
    s = np.asarray(ag.as_tensor(scores).values, dtype=np.float64)
    if k < 1 or k > _finite_count(s):
        raise DrawError(f"cannot draw {k} blocks from {_finite_count(s)} drawable ones")
    perturbed = s + gumbel_noise(rng, len(s))
    order = [int(j) for j in np.argsort(-perturbed, kind="stable")[:k]]
    return SubsetDraw(order, float(sequence_logprob(s, order).values))


def gumbel_topk_orders(scores, k: int, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` independent ordered draws as an (n, k) array; no log-probs."""
    s = np.asarray(ag.as_tensor(scores).values, dtype=np.float64)
    if k < 1 or k > _finite_count(s):
        raise DrawError(f"cannot draw {k} blocks from {_finite_count(s)} drawable ones")
    u = np.clip(rng.random((n, len(s))), _U_EPS, 1.0 - _U_EPS)
    perturbed = s - np.log(-np.log(u))
    return np.argsort(-perturbed, axis=1, kind="stable")[:, :k]


def greedy_topk(scores, k: int) -> list[int]:
    """K highest scores, descending; ties go to the lower block id."""
    s = np.asarray(ag.as_tensor(scores).values, dtype=np.float64)
    if k < 1 or k > _finite_count(s):
        raise DrawError(f"cannot keep {k} blocks from {_finite_count(s)} drawable ones")
    return sorted(range(len(s)), key=lambda j: (-s[j], j))[:k]


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def sequence_logprob(scores, order) -> Tensor:
    """log p(order | scores) for sequential sampling without replacement.

    Differentiable in ``scores`` when it is a graph tensor. The remaining
    log-mass is updated as Z + log1p(-exp(s_j - Z)); when that would lose
    precision the logsumexp of the remaining set is recomputed.
    """
    s_t = ag.as_tensor(scores)
    s = s_t.values
    order = [int(j) for j in order]
    n = len(s)
    if len(set(order)) != len(order):
        raise DrawError(f"order has repeated blocks: {order}")
    if any(j < 0 or j >= n for j in order):
        raise DrawError(f"block id out of range for {n} blocks: {order}")
    remaining = np.ones(n, dtype=bool)
    z = _logsumexp(s)
    total = 0.0
    log_norms = []
    for j in order:
        if not remaining.any() or s[j] <= -1e29:
            raise DrawError("draw exhausts the probability mass")
        log_norms.append(z)
        total += s[j] - z
        remaining[j] = False
        if not remaining.any():
            break
        frac = math.exp(s[j] - z)
        if frac >= 1.0 - CANCELLATION_GUARD:
            z = _logsumexp(s[remaining])
        else:
            z = z + math.log1p(-frac)
    if not np.isfinite(total):
        raise DrawError("non-finite sequence log-probability")

    def backward(g):
        grad = np.zeros(n)
        avail = np.ones(n, dtype=bool)
        for j, zj in zip(order, log_norms):
            p = np.where(avail, np.exp(np.where(avail, s - zj, 0.0)), 0.0)
            grad -= p
            grad[j] += 1.0
            avail[j] = False
        return (g * grad,)

    return ag._make(np.asarray(total), (s_t,), backward, "sequence_logprob")


def sequence_logprob_naive(scores, order) -> float:
    """Direct evaluation with a fresh logsumexp per step (reference)."""
    s = np.asarray(scores, dtype=np.float64)
    avail = np.ones(len(s), dtype=bool)
    total = 0.0
    for j in order:
        total += s[j] - _logsumexp(s[avail])
        avail[j] = False
    return total
