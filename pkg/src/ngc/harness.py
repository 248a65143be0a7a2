"""Evaluation, the peak-memory metric, experiment configs and reporting.

Evaluation rolls every instance out under each (scorer, eviction rate) pair.
Learned scoring keeps the top-scored blocks deterministically at test time,
the baselines apply their fixed rules. Peak memory is compared against the
same model's completions with eviction switched off.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .cache import EvictionConfig, peak_occupancy
from .model import ModelConfig, Params
from .rollout import generate
from .scoring import ScorerKind
from .tasks import Instance, TaskSpec, Vocab, verify
from .training import CurriculumConfig, TrainConfig, tag_prompt


# held-out instances come from a stream far from the training offsets
HELDOUT_OFFSET = 5_000_000


class ConfigError(ValueError):
    """An experiment config is malformed or internally inconsistent."""


# -- metrics ----------------------------------------------------------------


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimate of P(at least one of k draws is correct) from n draws with c correct."""
    if not 0 <= c <= n or not 1 <= k <= n:
        raise ValueError(f"need 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")
    if n - c < k:
        return 1.0
    return 1.0 - math.prod((n - c - i) / (n - i) for i in range(k))


def avg_peak_reduction(
    prompt_lens: Sequence[int],
    base_lens: Sequence[int],
    method_lens: Sequence[int],
    rate: float,
    cadence: int,
    block_size: int,
    n_layers: int = 1,
    window: int = 0,
) -> float:
    """Mean over prompts of peak(no eviction) / peak(method)."""
    if not len(prompt_lens):
        raise ValueError("avg_peak_reduction needs at least one prompt")
    if not len(prompt_lens) == len(base_lens) == len(method_lens):
        raise ValueError("prompt, baseline and method lengths must be paired")
    ratios = [
        peak_occupancy(p, cb, 0.0, cadence, block_size, n_layers, window)
        / peak_occupancy(p, cm, rate, cadence, block_size, n_layers, window)
        for p, cb, cm in zip(prompt_lens, base_lens, method_lens)
    ]
    return float(np.mean(ratios))


@dataclass
class EvalRow:
    scorer: str
    rate: float
    accuracy: float
    stderr: float
    pass_at: dict[int, float]
    peak_reduction: float
    mean_completion: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def get(self, scorer: str, rate: float) -> EvalRow:
        for r in self.rows:
            if r.scorer == scorer and math.isclose(r.rate, rate):
                return r
        raise KeyError((scorer, rate))

    def to_csv(self) -> str:
        ks = sorted({k for r in self.rows for k in r.pass_at})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scorer", "eps", "accuracy", "stderr", *[f"pass@{k}" for k in ks], "peak_reduction", "mean_completion"])
        for r in self.rows:
            w.writerow(
                [r.scorer, _fmt(r.rate), _fmt(r.accuracy), _fmt(r.stderr)]
                + [_fmt(r.pass_at[k]) for k in ks]
                + [_fmt(r.peak_reduction), _fmt(r.mean_completion)]
            )
        return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(round(float(x), 10))


def evaluate(
    params: Params,
    config: ModelConfig,
    vocab: Vocab,
    instances: Sequence[Instance],
    ecfg: EvictionConfig,
    scorers: Sequence[ScorerKind],
    rates: Sequence[float],
    *,
    samples: int = 1,
    ks: Sequence[int] = (1,),
    temperature: float = 1.0,
    max_new: int = 16,
    tagged: bool = False,
    seed: int = 0,
) -> EvalReport:
    """Roll out ``samples`` completions per instance for every (scorer, rate).

    Each instance/sample pair uses the same trajectory id across settings,
    so with ``temperature == 0`` the no-eviction run is the paired baseline
    for the peak-memory ratio.
    """
    if max(ks) > samples:
        raise ValueError(f"pass@{max(ks)} needs at least that many samples, got {samples}")

    def run(scorer: ScorerKind, rate: float):
        e = ecfg.with_rate(rate)
        correct = np.zeros((len(instances), samples), dtype=int)
        lens = np.zeros((len(instances), samples), dtype=int)
        plens = []
        for i, inst in enumerate(instances):
            prompt = tag_prompt(inst.prompt, rate, vocab, tagged)
            plens.append(len(prompt))
            for j in range(samples):
                traj = generate(
                    params, config, prompt, e, max_new=max_new, eos_id=vocab.eos, scorer=scorer,
                    greedy_evict=True, temperature=temperature, seed=seed, trajectory=i * samples + j,
                )
                correct[i, j] = verify(inst, traj.completion, vocab)
                lens[i, j] = len(traj.completion)
        return correct, lens, plens

    base_cache: dict[str, tuple] = {}
    report = EvalReport()
    for scorer in scorers:
        key = scorer.name
        if key not in base_cache:
            base_cache[key] = run(scorer, 0.0)
        base_correct, base_lens, _ = base_cache[key]
        for rate in rates:
            correct, lens, plens = (base_correct, base_lens, base_cache[key][2]) if rate == 0 else run(scorer, rate)
            per_inst = correct.mean(axis=1)
            acc = float(per_inst.mean())
            se = float(per_inst.std(ddof=1) / math.sqrt(len(per_inst))) if len(per_inst) > 1 else 0.0
            pk = {k: float(np.mean([pass_at_k(samples, int(c), k) for c in correct.sum(axis=1)])) for k in ks}
            p_all = np.repeat(plens, samples)
            red = avg_peak_reduction(
                p_all, base_lens.ravel(), lens.ravel(), rate, ecfg.cadence, ecfg.block_size, config.n_layers,
                ecfg.window,
            )
            report.rows.append(EvalRow(scorer.name, float(rate), acc, se, pk, red, float(lens.mean())))
    return report


# -- experiment config --------------------------------------------------------


@dataclass
class ExperimentConfig:
    # defaults are the desk-scale keyed-recall setup
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=len(Vocab()), max_seq=64))
    eviction: EvictionConfig = field(
        default_factory=lambda: EvictionConfig(cadence=16, rate=0.5, block_size=1, window=2, n_layers=2)
    )
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3))
    task: TaskSpec = field(default_factory=lambda: TaskSpec(pairs=6, filler=6, think=8))
    n_keys: int = 8
    n_values: int = 8
    warmup_steps: int = 0
    warmup_lr: float = 3e-3
    rl_steps: int = 0
    eval_eps: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75)
    eval_scorers: tuple[str, ...] = ("ngc", "streaming")
    eval_instances: int = 100
    eval_samples: int = 1
    eval_ks: tuple[int, ...] = (1,)
    eval_temperature: float = 1.0
    max_new: int | None = None
    output_dir: str = "runs"
    run_id: str = "default"

    _SECTIONS = {
        "model": ModelConfig,
        "eviction": EvictionConfig,
        "curriculum": CurriculumConfig,
        "train": TrainConfig,
        "task": TaskSpec,
    }

    def __post_init__(self):
        self.validate()

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_keys, self.n_values)

    @property
    def completion_budget(self) -> int:
        return self.max_new if self.max_new is not None else self.task.think + 6

    def validate(self) -> None:
        v = self.vocab
        if self.model.vocab_size != len(v):
            raise ConfigError(f"model.vocab_size={self.model.vocab_size} but the task vocabulary has {len(v)} tokens")
        if self.eviction.n_layers != self.model.n_layers:
            raise ConfigError("eviction.n_layers must equal model.n_layers")
        if self.model.max_seq < self.eviction.cadence:
            raise ConfigError("model.max_seq must be at least the eviction cadence")
        if any(not 0 <= e <= 1 for e in self.eval_eps):
            raise ConfigError("eval_eps entries must lie in [0, 1]")
        for s in self.eval_scorers:
            try:
                ScorerKind.parse(s)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.eval_samples < max(self.eval_ks):
            raise ConfigError("eval_samples must be >= every k in eval_ks")
        if self.task.kind == "keyed-recall" and self.task.pairs > self.n_keys:
            raise ConfigError("keyed-recall needs pairs <= n_keys")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(val) if dataclasses.is_dataclass(val) else val
            if isinstance(out[f.name], tuple):
                out[f.name] = list(out[f.name])
        out["curriculum"]["levels"] = list(out["curriculum"]["levels"])
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any], env: dict[str, str] | None = None) -> ExperimentConfig:
        env = os.environ if env is None else env
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs: dict[str, Any] = {}
        for name, value in data.items():
            if name in cls._SECTIONS:
                kwargs[name] = _build_section(name, cls._SECTIONS[name], value)
            elif isinstance(value, list):
                kwargs[name] = tuple(value)
            else:
                kwargs[name] = value
        if "NGC_SEED" in env:
            try:
                seed = int(env["NGC_SEED"])
            except ValueError:
                raise ConfigError(f"NGC_SEED must be an integer, got {env['NGC_SEED']!r}") from None
            defaults = {f.name: f.default_factory for f in dataclasses.fields(cls) if f.name in cls._SECTIONS}
            for name in ("model", "train", "task"):
                section = kwargs.get(name) or defaults[name]()
                kwargs[name] = dataclasses.replace(section, seed=seed)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, env: dict[str, str] | None = None) -> ExperimentConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data, env)

    def with_overrides(self, overrides: dict[str, Any]) -> ExperimentConfig:
        """Apply ``section.field=value`` style overrides, e.g. {"train.lr": 0.01}."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            parts = dotted.split(".")
            node = data
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section in override {dotted!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key in override {dotted!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(data, env={})


def _build_section(name: str, cls, value):
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(value) - fields)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    try:
        return cls(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


# -- output -------------------------------------------------------------------


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) if isinstance(x, float) else x for x in row])


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _esc(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _frame(width, height, title, xlabel, ylabel, body: list[str]) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{_esc(title)}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 6}" text-anchor="middle" font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.1f})">{_esc(ylabel)}</text>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _axes(x0, y0, x1, y1, ylo, yhi, xticks: list[tuple[float, str]]) -> list[str]:
    out = [
        f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
    ]
    for i in range(5):
        v = ylo + (yhi - ylo) * i / 4
        y = y1 - (y1 - y0) * i / 4
        out.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
        out.append(
            f'<text x="{x0 - 6}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.3g}</text>'
        )
    for x, label in xticks:
        out.append(f'<line x1="{x:.1f}" y1="{y1}" x2="{x:.1f}" y2="{y1 + 4}" stroke="black"/>')
        out.append(
            f'<text x="{x:.1f}" y="{y1 + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{_esc(label)}</text>'
        )
    return out


def line_chart_svg(series: dict[str, Sequence[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
                   width: int = 480, height: int = 320) -> str:
    """Static SVG line chart; ``series`` maps a label to (x, y) points."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("nothing to plot")
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    xlo, xhi = min(xs), max(xs)
    ylo, yhi = min(0.0, min(ys)), max(ys)
    if xhi == xlo:
        xhi = xlo + 1
    if yhi == ylo:
        yhi = ylo + 1
    x0, y0, x1, y1 = 60, 36, width - 120, height - 40

    def px(x):
        return x0 + (x - xlo) / (xhi - xlo) * (x1 - x0)

    def py(y):
        return y1 - (y - ylo) / (yhi - ylo) * (y1 - y0)

    ticks = [(px(x), f"{x:.3g}") for x in sorted(set(xs))]
    body = _axes(x0, y0, x1, y1, ylo, yhi, ticks)
    for i, (label, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        s = sorted(s)
        path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in s)
        body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        body += [f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>' for x, y in s]
        ly = y0 + 16 * i
        body.append(f'<line x1="{x1 + 10}" y1="{ly}" x2="{x1 + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{x1 + 32}" y="{ly + 4}" font-family="sans-serif" font-size="11">{_esc(label)}</text>')
    return _frame(width, height, title, xlabel, ylabel, body)


def bar_chart_svg(values: dict[str, float], title: str, ylabel: str, width: int = 480, height: int = 320) -> str:
    if not values:
        raise ValueError("nothing to plot")
    ylo, yhi = min(0.0, *values.values()), max(values.values())
    if yhi == ylo:
        yhi = ylo + 1
    x0, y0, x1, y1 = 60, 36, width - 20, height - 40
    slot = (x1 - x0) / len(values)

    def py(y):
        return y1 - (y - ylo) / (yhi - ylo) * (y1 - y0)

    ticks = [(x0 + slot * (i + 0.5), k) for i, k in enumerate(values)]
    body = _axes(x0, y0, x1, y1, ylo, yhi, ticks)
    for i, v in enumerate(values.values()):
        top, base = py(max(v, 0)), py(min(v, 0))
        body.append(
            f'<rect x="{x0 + slot * i + slot * 0.15:.1f}" y="{top:.1f}" width="{slot * 0.7:.1f}" '
            f'height="{base - top:.1f}" fill="{PALETTE[i % len(PALETTE)]}"/>'
        )
    return _frame(width, height, title, "", ylabel, body)


def report_charts(report: EvalReport) -> dict[str, str]:
    """Accuracy and peak reduction versus eviction rate, one line per scorer."""
    acc: dict[str, list] = {}
    red: dict[str, list] = {}
    for r in report.rows:
        acc.setdefault(r.scorer, []).append((r.rate, r.accuracy))
        red.setdefault(r.scorer, []).append((r.rate, r.peak_reduction))
    return {
        "accuracy.svg": line_chart_svg(acc, "Accuracy under eviction", "eviction rate", "accuracy"),
        "peak_reduction.svg": line_chart_svg(red, "Average peak KV reduction", "eviction rate", "reduction (x)"),
    }
