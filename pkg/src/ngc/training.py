"""Joint token/eviction policy-gradient training.

One outcome reward per trajectory drives both heads of the policy: the
group-centred advantage multiplies the replayed token log-probabilities
and the recomputed eviction log-probabilities, and one backward pass over
their sum reaches every parameter. The memory budget is never a loss term;
it is enforced by the eviction rate the rollouts run under.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .cache import EvictionConfig
from .model import ModelConfig, Params, causal_mask, forward_masked
from .replay import replay_batch
from .rollout import Trajectory, generate
from .tasks import Instance, TaskSpec, Vocab, generate_instances, verify

log = logging.getLogger(__name__)

MODES = ("ngc", "token_only", "targeted_dropout", "no_evict")


# -- advantages and losses -------------------------------------------------


def group_advantages(rewards) -> np.ndarray:
    """r_i minus the group mean; no std normalisation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two trajectories")
    return r - r.mean()


def token_loss(token_logprobs: Sequence[Tensor], advantages, group_size: int | None = None) -> Tensor:
    """-(1/G) sum_i A_i sum_t log pi(o_it); tokens are summed, not averaged.

    ``group_size`` defaults to the number of trajectories passed; set it
    when zero-advantage trajectories were left out.
    """
    g = group_size or len(token_logprobs)
    total = Tensor(0.0)
    for lp, a in zip(token_logprobs, advantages):
        if a != 0.0 and lp.shape[0]:
            total = total + ag.scale(lp.sum(), -float(a) / g)
    return total


def mem_loss(round_logprobs: Sequence[Sequence[Sequence[Tensor]]], advantages, group_size: int | None = None) -> Tensor:
    """Sum over layers of -(1/G) sum_i A_i mean_rounds log p(sigma).

    ``round_logprobs[i][layer]`` lists trajectory i's rounds at that layer;
    trajectories without rounds contribute nothing.
    """
    g = group_size or len(round_logprobs)
    total = Tensor(0.0)
    for per_layer, a in zip(round_logprobs, advantages):
        if a == 0.0:
            continue
        for rounds in per_layer:
            if not rounds:
                continue
            s = rounds[0] if len(rounds) == 1 else ag.stack(rounds).sum()
            total = total + ag.scale(s, -float(a) / (g * len(rounds)))
    return total


def total_loss(tok: Tensor, mem: Tensor | None = None) -> Tensor:
    return tok if mem is None else tok + mem


# -- curriculum, tags, reward shaping -------------------------------------


@dataclass(frozen=True)
class CurriculumConfig:
    levels: tuple[float, ...] = (1.0, 0.875, 0.75, 0.625, 0.5)
    steps_per_stage: int = 20
    alpha: float = 0.6

    def __post_init__(self):
        if not self.levels:
            raise ValueError("curriculum needs at least one level")
        if any(b > a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("retention levels must be nonincreasing")
        if any(not 0 < r <= 1 for r in self.levels):
            raise ValueError("retention levels must lie in (0, 1]")
        if self.steps_per_stage < 1:
            raise ValueError("steps_per_stage must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @classmethod
    def constant(cls, retention: float) -> CurriculumConfig:
        return cls((retention,), 1, 0.6)


def curriculum_stage(step: int, config: CurriculumConfig) -> int:
    return min(step // config.steps_per_stage, len(config.levels) - 1)


def curriculum_rate(step: int, config: CurriculumConfig) -> float:
    """Retention p0(step): hold each level, then blend linearly into the next."""
    if step < 0:
        raise ValueError("step must be >= 0")
    levels, delta, alpha = config.levels, config.steps_per_stage, config.alpha
    stage = curriculum_stage(step, config)
    if stage == len(levels) - 1:
        return levels[-1]
    s = (step % delta) / delta
    if s < 1 - alpha:
        return levels[stage]
    return levels[stage] + (s - (1 - alpha)) / alpha * (levels[stage + 1] - levels[stage])


def format_percent(value: float) -> str:
    return np.format_float_positional(float(value), trim="-")


def interoception_tag(rate_percent: float) -> str:
    if not 0 <= rate_percent <= 100:
        raise ValueError("eviction rate must be a percentage in [0, 100]")
    return f"<eviction_rate>{format_percent(rate_percent)}%</eviction_rate>"


def tag_prompt(prompt: list[int], rate: float, vocab: Vocab, enabled: bool = True) -> list[int]:
    if not enabled:
        return list(prompt)
    # whole percent: blended curriculum rates would otherwise spell out many digits
    return list(prompt) + vocab.encode(interoception_tag(math.floor(100 * rate + 0.5)))


def apply_min_length_penalty(reward: float, total_len: int, threshold: int | None) -> float:
    """Zero the reward of a trajectory shorter than ``threshold`` tokens."""
    if threshold is not None and total_len < threshold:
        return 0.0
    return reward


# -- optimiser ------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-15
    clip: float = 1.0
    weight_decay: float = 0.0
    group_size: int = 8
    prompts_per_step: int = 4
    temperature: float = 1.0
    min_length: int | None = None
    meta_token: bool = False
    interoception: bool = False
    # draw each group's rate from neighbouring curriculum levels; always on with interoception
    rate_spread: bool = False
    mode: str = "ngc"
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.clip <= 0:
            raise ValueError("learning rate and clip must be positive")
        if self.temperature <= 0:
            raise ValueError("rollout temperature must be positive")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")


class NonFiniteGradient(FloatingPointError):
    pass


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


class AdamW:
    """Adam with decoupled weight decay and global-norm clipping."""

    def __init__(self, params: Params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, clip=None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def zero_grad(self) -> None:
        ag.zero_grads(self.params.values())

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.values)) for k, p in self.params.items()}
        norm = global_grad_norm(list(grads.values()))
        if not math.isfinite(norm):
            bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
            raise NonFiniteGradient(f"non-finite gradient in {bad}")
        factor = 1.0
        if self.clip is not None and norm > self.clip:
            factor = self.clip / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in self.params.items():
            g = grads[k] * factor
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                p.values -= self.lr * self.weight_decay * p.values
            p.values -= self.lr * update
        return norm


def optimizer_step(optimizer: AdamW) -> float:
    return optimizer.step()


def make_optimizer(params: Params, cfg: TrainConfig) -> AdamW:
    return AdamW(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay, cfg.clip)


# -- supervised warm start --------------------------------------------------


def supervised_warmup(
    params: Params,
    config: ModelConfig,
    spec: TaskSpec,
    vocab: Vocab,
    *,
    steps: int,
    batch: int = 32,
    lr: float = 3e-3,
    seed: int = 0,
    rates: Sequence[float] | None = None,
    tagged: bool = False,
    callback: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Teacher-forced cross-entropy on target completions, full cache.

    Stands in for pretraining: it gives the policy the answer format and
    a working retrieval circuit before any eviction is introduced.
    ``rates`` only matters with ``tagged`` (sampled tag per example).
    """
    opt = AdamW(params, lr=lr, betas=(0.9, 0.98), eps=1e-9, clip=1.0)
    rng = np.random.default_rng([seed, 0x5F7])
    losses = []
    for step in range(steps):
        insts = generate_instances(spec, batch, vocab, offset=10_000_000 + seed * 1_000_003 + step * batch)
        seqs, plens = [], []
        for inst in insts:
            prompt = inst.prompt
            if tagged:
                prompt = tag_prompt(prompt, float(rng.choice(rates)), vocab)
            seqs.append(prompt + inst.target_completion(vocab, spec.think))
            plens.append(len(prompt))
        t = max(map(len, seqs))
        toks = np.full((batch, t), vocab.pad, dtype=np.int64)
        weight = np.zeros((batch, t - 1))
        for i, sq in enumerate(seqs):
            toks[i, : len(sq)] = sq
            weight[i, plens[i] - 1 : len(sq) - 1] = 1.0
        logits, _ = forward_masked(params, config, toks, [causal_mask(t)] * config.n_layers, check=False)
        logp = ag.log_softmax_lastdim(logits)
        rows = np.repeat(np.arange(batch), t - 1)
        cols = np.tile(np.arange(t - 1), batch)
        picked = ag.getitem(logp, (rows, cols, toks[:, 1:].reshape(-1)))
        loss = ag.scale((picked * Tensor(weight.reshape(-1))).sum(), -1.0 / weight.sum())
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if callback is not None:
            callback(step, losses[-1])
    return losses


# -- RL loop --------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    grad_norm: float
    retention_rate: float
    mean_peak_cache: float
    loss_token: float
    loss_mem: float

    def row(self) -> dict:
        return self.__dict__.copy()


METRIC_COLUMNS = ["step", "mean_reward", "grad_norm", "retention_rate", "mean_peak_cache", "loss_token", "loss_mem"]


def group_rates(step: int, curriculum: CurriculumConfig, n_groups: int, rng, spread: bool) -> list[float]:
    """Per-group retention; with ``spread`` each group draws from the
    current stage's level and its neighbours."""
    p0 = curriculum_rate(step, curriculum)
    if not spread:
        return [p0] * n_groups
    stage = curriculum_stage(step, curriculum)
    choices = {p0}
    for j in (stage - 1, stage + 1):
        if 0 <= j < len(curriculum.levels):
            choices.add(curriculum.levels[j])
    choices = sorted(choices)
    return [float(choices[int(rng.integers(len(choices)))]) for _ in range(n_groups)]


@dataclass
class RLState:
    params: Params
    optimizer: AdamW
    step: int = 0
    history: list[StepMetrics] = field(default_factory=list)


def rollout_group(
    params: Params,
    config: ModelConfig,
    inst: Instance,
    vocab: Vocab,
    ecfg: EvictionConfig,
    tcfg: TrainConfig,
    *,
    max_new: int,
    seed: int,
    base_id: int,
    tagged: bool,
) -> list[Trajectory]:
    prompt = tag_prompt(inst.prompt, ecfg.rate, vocab, tagged)
    out = []
    for g in range(tcfg.group_size):
        traj = generate(
            params,
            config,
            prompt,
            ecfg,
            max_new=max_new,
            eos_id=vocab.eos,
            temperature=tcfg.temperature,
            seed=seed,
            trajectory=base_id + g,
            meta_token=vocab.meta if tcfg.meta_token else None,
        )
        r = float(verify(inst, traj.completion, vocab))
        traj.reward = apply_min_length_penalty(r, len(traj), tcfg.min_length)
        out.append(traj)
    return out


def rl_step(
    state: RLState,
    config: ModelConfig,
    spec: TaskSpec,
    vocab: Vocab,
    ecfg: EvictionConfig,
    curriculum: CurriculumConfig,
    tcfg: TrainConfig,
    *,
    max_new: int,
) -> StepMetrics:
    step = state.step
    rng = np.random.default_rng([tcfg.seed, step, 0xC0])
    insts = generate_instances(spec, tcfg.prompts_per_step, vocab, offset=step * tcfg.prompts_per_step)
    rates = group_rates(step, curriculum, len(insts), rng, tcfg.interoception or tcfg.rate_spread)
    groups = []
    for gi, (inst, p0) in enumerate(zip(insts, rates)):
        eps = 0.0 if tcfg.mode == "no_evict" else 1.0 - p0
        e = ecfg.with_rate(eps)
        base = (step * tcfg.prompts_per_step + gi) * tcfg.group_size
        groups.append(
            rollout_group(
                state.params, config, inst, vocab, e, tcfg, max_new=max_new, seed=tcfg.seed, base_id=base,
                tagged=tcfg.interoception,
            )
        )
    state.optimizer.zero_grad()
    n_groups = len(groups)
    tok_total = mem_total = 0.0
    for group in groups:
        adv = group_advantages([t.reward for t in group])
        active = [i for i, a in enumerate(adv) if a != 0.0]
        if not active:
            continue
        items = [(group[i].tokens, group[i].log, group[i].prompt_len) for i in active]
        use_rounds = tcfg.mode == "ngc"
        results = replay_batch(
            state.params, config, items, ecfg, causal=tcfg.mode == "targeted_dropout",
            with_rounds=use_rounds, pad_id=vocab.pad, temperature=tcfg.temperature,
        )
        g = len(group)
        tl = ag.scale(token_loss([r.token_logprobs for r in results], adv[active], g), 1.0 / n_groups)
        loss = tl
        if use_rounds:
            ml = ag.scale(mem_loss([r.round_logprobs for r in results], adv[active], g), 1.0 / n_groups)
            mem_total += ml.item()
            loss = total_loss(tl, ml)
        tok_total += tl.item()
        if loss.requires_grad:
            loss.backward()
    grad_norm = state.optimizer.step()
    trajs = [t for grp in groups for t in grp]
    metrics = StepMetrics(
        step,
        float(np.mean([t.reward for t in trajs])),
        grad_norm,
        float(np.mean(rates)) if tcfg.mode != "no_evict" else 1.0,
        float(np.mean([t.peak_entries for t in trajs])),
        tok_total,
        mem_total,
    )
    state.history.append(metrics)
    state.step += 1
    return metrics


def train_loop(
    params: Params,
    config: ModelConfig,
    spec: TaskSpec,
    vocab: Vocab,
    ecfg: EvictionConfig,
    curriculum: CurriculumConfig,
    tcfg: TrainConfig,
    steps: int,
    *,
    max_new: int | None = None,
    callback: Callable[[StepMetrics], None] | None = None,
) -> list[StepMetrics]:
    """Run ``steps`` on-policy updates in ``tcfg.mode``; returns the metric rows."""
    if max_new is None:
        max_new = spec.think + 6
    state = RLState(params, make_optimizer(params, tcfg))
    for _ in range(steps):
        m = rl_step(state, config, spec, vocab, ecfg, curriculum, tcfg, max_new=max_new)
        if not (math.isfinite(m.loss_token) and math.isfinite(m.loss_mem)):
            raise FloatingPointError(f"non-finite loss at step {m.step}")
        if callback is not None:
            callback(m)
    return state.history
