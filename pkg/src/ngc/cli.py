"""Command line entry point: ``ngc train|eval|sweep|inspect-masks|selftest``.

Failures exit nonzero and print ``error[<category>]: <message>`` on stderr,
with categories ``usage`` (2), ``config`` (3), ``checkpoint`` (4) and
``selftest`` (5).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .cache import EvictionConfig, RetentionLog, pre_round_sizes, steady_state_size
from .harness import (
    HELDOUT_OFFSET,
    ConfigError,
    ExperimentConfig,
    evaluate,
    line_chart_svg,
    report_charts,
    write_csv,
)
from .model import ModelConfig, copy_params, forward_masked, init_params, load_checkpoint, save_checkpoint
from .replay import build_replay_masks, demo_retention_log, mask_to_grid, mask_to_pbm, replay_forward
from .rollout import generate
from .sampling import sequence_logprob
from .scoring import ScorerKind
from .tasks import generate_instances
from .training import METRIC_COLUMNS, curriculum_rate, supervised_warmup, train_loop

EXIT_USAGE, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_SELFTEST = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, category: str, code: int, message: str):
        super().__init__(message)
        self.category = category
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, message)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
        overrides = {}
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            overrides[key] = _parse_value(value)
        return cfg.with_overrides(overrides) if overrides else cfg
    except FileNotFoundError:
        raise CliError("config", EXIT_CONFIG, f"config file not found: {args.config}") from None
    except ConfigError as exc:
        raise CliError("config", EXIT_CONFIG, str(exc)) from None


def _run_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir) / cfg.run_id
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_params(path, expected: ModelConfig):
    path = Path(path)
    if not path.exists():
        raise CliError("checkpoint", EXIT_CHECKPOINT, f"checkpoint not found: {path}")
    try:
        params, mcfg, _ = load_checkpoint(path)
    except Exception as exc:
        raise CliError("checkpoint", EXIT_CHECKPOINT, f"{path}: {exc}") from None
    if mcfg != expected:
        raise CliError("checkpoint", EXIT_CHECKPOINT, f"{path}: model config {mcfg} does not match {expected}")
    return params


# -- subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _run_dir(cfg, args)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    vocab = cfg.vocab
    params = _load_params(args.init, cfg.model) if args.init else init_params(cfg.model)
    log = (lambda *a: None) if args.quiet else (lambda *a: print(*a, file=sys.stderr, flush=True))
    if cfg.warmup_steps:
        eps = sorted({round(1.0 - lv, 10) for lv in cfg.curriculum.levels})
        losses = supervised_warmup(
            params, cfg.model, cfg.task, vocab, steps=cfg.warmup_steps, lr=cfg.warmup_lr, seed=cfg.train.seed,
            rates=eps, tagged=cfg.train.interoception,
        )
        write_csv(out / "warmup.csv", ["step", "loss"], list(enumerate(losses)))
        log(f"warmup: {cfg.warmup_steps} steps, final loss {losses[-1]:.4f}")
    rows = []

    def on_step(m):
        rows.append([m.row()[c] for c in METRIC_COLUMNS])
        log(f"step {m.step}: reward {m.mean_reward:.3f} grad {m.grad_norm:.3f} p0 {m.retention_rate:.3f}")

    t0 = time.time()
    train_loop(
        params, cfg.model, cfg.task, vocab, cfg.eviction, cfg.curriculum, cfg.train, cfg.rl_steps,
        max_new=cfg.completion_budget, callback=on_step,
    )
    write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    if rows:
        reward = [(r[0], r[1]) for r in rows]
        (out / "reward.svg").write_text(line_chart_svg({cfg.train.mode: reward}, "Training reward", "step", "reward"))
    save_checkpoint(out / "model.ckpt", params, cfg.model, {"run_id": cfg.run_id, "rl_steps": cfg.rl_steps})
    log(f"trained {cfg.rl_steps} steps in {time.time() - t0:.1f}s; wrote {out}")
    print(out / "model.ckpt")
    return 0


def _eval(args, eps: Sequence[float], scorers: Sequence[str]) -> int:
    cfg = _load_config(args)
    out = _run_dir(cfg, args)
    ckpt = args.checkpoint or out / "model.ckpt"
    params = _load_params(ckpt, cfg.model)
    try:
        kinds = [ScorerKind.parse(s) for s in scorers]
    except ValueError as exc:
        raise CliError("config", EXIT_CONFIG, str(exc)) from None
    instances = generate_instances(cfg.task, cfg.eval_instances, cfg.vocab, offset=HELDOUT_OFFSET)
    report = evaluate(
        params, cfg.model, cfg.vocab, instances, cfg.eviction, kinds, eps, samples=cfg.eval_samples,
        ks=cfg.eval_ks, temperature=cfg.eval_temperature, max_new=cfg.completion_budget,
        tagged=cfg.train.interoception, seed=cfg.train.seed,
    )
    text = report.to_csv()
    (out / "eval.csv").write_text(text)
    for name, svg in report_charts(report).items():
        (out / name).write_text(svg)
    sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    return _eval(args, cfg.eval_eps, cfg.eval_scorers)


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError("usage", EXIT_USAGE, f"--eps expects comma separated numbers, got {text!r}") from None
    if not vals or any(not 0 <= v <= 1 for v in vals):
        raise CliError("usage", EXIT_USAGE, f"--eps values must lie in [0, 1], got {text!r}")
    return vals


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    scorers = args.scorers.split(",") if args.scorers else list(cfg.eval_scorers)
    return _eval(args, _float_list(args.eps), scorers)


def cmd_inspect_masks(args) -> int:
    if args.log:
        if args.length is None:
            raise CliError("usage", EXIT_USAGE, "--log needs --length")
        try:
            with open(args.log) as fh:
                log = RetentionLog.load(fh, args.layers)
        except FileNotFoundError:
            raise CliError("config", EXIT_CONFIG, f"log file not found: {args.log}") from None
        length = args.length
    else:
        log, length = demo_retention_log(args.layers)
    try:
        masks = build_replay_masks(log, length, args.cadence)
    except ValueError as exc:
        raise CliError("config", EXIT_CONFIG, str(exc)) from None
    layers = range(len(masks)) if args.layer is None else [args.layer]
    for layer in layers:
        if layer >= len(masks):
            raise CliError("usage", EXIT_USAGE, f"layer {layer} out of range")
        if len(masks) > 1 and args.format == "grid":
            print(f"layer {layer}")
        if args.format == "pbm":
            sys.stdout.write(mask_to_pbm(masks[layer]))
        else:
            print(mask_to_grid(masks[layer]))
    return 0


# -- selftest -------------------------------------------------------------------


def _check_steady_state() -> bool:
    for eps in (0.25, 0.5, 0.75, 1.0):
        for cadence in (64, 256):
            last = pre_round_sizes(cadence, eps, 32, 50)[-1]
            if abs(last - steady_state_size(cadence, eps)) > 32:
                return False
    return True


def _check_gumbel_enumeration() -> bool:
    import itertools

    rng = np.random.default_rng(0)
    for n in range(1, 5):
        for k in range(1, min(n, 3) + 1):
            s = rng.uniform(-3, 3, n)
            total = sum(np.exp(sequence_logprob(s, list(o)).item()) for o in itertools.permutations(range(n), k))
            if abs(total - 1.0) > 1e-9:
                return False
    return True


def _check_demo_grid() -> bool:
    log, t = demo_retention_log()
    grid = mask_to_grid(build_replay_masks(log, t)[0]).splitlines()
    return grid[5] == "#.#.##...." and grid[9] == "#...#.####"


def _check_replay() -> bool:
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=20, max_seq=64, seed=3)
    params = init_params(cfg)
    rng = np.random.default_rng(3)
    for t in params.values():
        t.values = t.values + rng.normal(0, 0.3, t.shape)
    ecfg = EvictionConfig(cadence=8, rate=0.5, block_size=2, window=1, n_layers=2)
    for seed in range(3):
        traj = generate(params, cfg, [1, 2, 3, 4], ecfg, max_new=24, eos_id=cfg.vocab_size, seed=seed,
                        return_logits=True)
        res = replay_forward(params, cfg, traj.tokens, traj.log, traj.prompt_len, ecfg, check_tol=1e-9)
        replayed = res.logits.values[traj.prompt_len - 1 : len(traj.tokens) - 1]
        if traj.log.n_rounds == 0 or np.max(np.abs(replayed - traj.meta["logits"])) > 1e-9:
            return False
    return True


def _check_no_eviction_is_causal() -> bool:
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, vocab_size=12, max_seq=32, seed=1)
    params = init_params(cfg)
    toks = np.arange(10) % 12
    a = forward_masked(params, cfg, toks)[0].values
    b = forward_masked(copy_params(params), cfg, toks, build_replay_masks(RetentionLog(1), 10))[0].values
    return bool(np.array_equal(a, b))


def _check_curriculum() -> bool:
    cfg = ExperimentConfig().curriculum
    return curriculum_rate(0, cfg) == cfg.levels[0] and curriculum_rate(10**6, cfg) == cfg.levels[-1]


SELFTEST_CHECKS = {
    "steady-state cache size": _check_steady_state,
    "gumbel-top-k probabilities sum to one": _check_gumbel_enumeration,
    "demo replay grid": _check_demo_grid,
    "rollout logits replay exactly": _check_replay,
    "empty log gives causal attention": _check_no_eviction_is_causal,
    "curriculum endpoints": _check_curriculum,
}


def cmd_selftest(args) -> int:
    failed = []
    for name, check in SELFTEST_CHECKS.items():
        try:
            ok = check()
        except Exception as exc:  # a crash counts as a failure, with its reason
            ok = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failed.append(name)
    if failed:
        raise CliError("selftest", EXIT_SELFTEST, f"{len(failed)} check(s) failed")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ngc", description="Learned KV-cache eviction on a toy transformer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON experiment config (defaults are used when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.lr=0.001 (repeatable)")
        sp.add_argument("--out", help="run directory (default: <output_dir>/<run_id>)")
        return sp

    t = with_config(sub.add_parser("train", help="supervised warm-up then policy-gradient training"))
    t.add_argument("--init", help="start from this checkpoint instead of fresh weights")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = with_config(sub.add_parser("eval", help="evaluate over the config's scorer and eps grid"))
    e.add_argument("--checkpoint", help="model checkpoint (default: <run dir>/model.ckpt)")
    e.set_defaults(func=cmd_eval)

    s = with_config(sub.add_parser("sweep", help="evaluate over an explicit eps grid"))
    s.add_argument("--checkpoint")
    s.add_argument("--eps", required=True, help="comma separated eviction rates, e.g. 0.25,0.5,0.75")
    s.add_argument("--scorers", help="comma separated scorer names (default: config eval_scorers)")
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("inspect-masks", help="print replay masks (the built-in demo log by default)")
    m.add_argument("--log", help="retention log in JSON lines")
    m.add_argument("--length", type=int, help="sequence length for --log")
    m.add_argument("--layers", type=int, default=1, help="number of layers in the log")
    m.add_argument("--layer", type=int, help="print only this layer")
    m.add_argument("--cadence", type=int, help="check round positions against this cadence")
    m.add_argument("--format", choices=["grid", "pbm"], default="grid")
    m.set_defaults(func=cmd_inspect_masks)

    st = sub.add_parser("selftest", help="run the built-in invariant checks")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
