import io

import numpy as np
import pytest

from ngc.cache import EvictionConfig, RetentionLog, RoundRecord
from ngc.model import ModelConfig, causal_mask, forward_masked, init_params
from ngc.replay import (
    ReplayConsistencyError,
    build_replay_masks,
    demo_retention_log,
    is_key_side_representable,
    mask_to_grid,
    mask_to_pbm,
    replay_batch,
    replay_forward,
    visible_sets,
)
from ngc.rollout import generate

from conftest import decode_with_log, random_log

CFG = ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=20, max_seq=160, seed=5)

DEMO_GRID = """\
#.........
##........
###.......
####......
#####.....
#.#.##....
#.#.###...
#.#.####..
#...#.###.
#...#.####"""


@pytest.fixture(scope="module")
def params():
    p = init_params(CFG)
    rng = np.random.default_rng(1)
    for t in p.values():
        t.values = t.values + rng.normal(0, 0.3, t.shape)
    return p


def test_demo_grid_exact():
    log, t = demo_retention_log()
    (mask,) = build_replay_masks(log, t)
    assert mask_to_grid(mask) == DEMO_GRID
    rows = visible_sets(mask)
    assert rows[6] == [0, 2, 4, 5, 6]
    assert rows[8] == [0, 4, 6, 7, 8]
    for r in range(1, 5):
        assert rows[r] == list(range(r + 1))


def test_demo_pbm_dump():
    log, t = demo_retention_log()
    pbm = mask_to_pbm(build_replay_masks(log, t)[0])
    lines = pbm.splitlines()
    assert lines[:2] == ["P1", "10 10"]
    assert lines[2 + 8] == "1 0 0 0 1 0 1 1 1 0"


def test_empty_log_is_causal():
    masks = build_replay_masks(RetentionLog(3), 7)
    assert len(masks) == 3 and all(np.array_equal(m, causal_mask(7)) for m in masks)


def test_eviction_breaks_key_side_monotonicity():
    log, t = demo_retention_log()
    (mask,) = build_replay_masks(log, t)
    assert not is_key_side_representable(mask)
    assert is_key_side_representable(causal_mask(t))
    # key t1 is visible to rows 1..4 and hidden from 5 on
    assert mask[1:5, 1].all() and not mask[5:, 1].any()


def test_evicted_keys_stay_hidden(rng):
    for _ in range(20):
        log = random_log(rng, 2, 60, cadence=8, block_size=2, window=1)
        masks = build_replay_masks(log, 60, cadence=8)
        for layer, mask in enumerate(masks):
            for rec in log.layer_rounds(layer):
                gone = sorted(set(rec.alive_indices) - set(rec.kept_indices()))
                if gone:
                    assert not mask[rec.position :, gone].any()
                # survivors are visible to every row up to the next round
                assert mask[rec.position, rec.kept_indices()].all()


def test_layers_get_their_own_masks(rng):
    log = random_log(rng, 2, 40, cadence=8, block_size=2, window=0, rate=0.5)
    a, b = build_replay_masks(log, 40)
    assert not np.array_equal(a, b)


def _mutate(log, **changes):
    recs = [RoundRecord(**{**r.__dict__}) for r in log.records]
    for i, field_, value in changes.get("edits", []):
        setattr(recs[i], field_, value)
    out = RetentionLog(log.n_layers)
    for r in recs:
        out.append(r)
    return out


@pytest.mark.parametrize(
    "edits,length,cadence",
    [
        ([(1, "round", 2)], 10, None),
        ([], 7, None),
        ([], 10, 4),
        ([(1, "alive_indices", [0, 1, 4, 5, 6, 7])], 10, None),
        ([(0, "kept_blocks", [9])], 10, None),
        ([(0, "block_sizes", [3, 3])], 10, None),
    ],
)
def test_inconsistent_logs_rejected(edits, length, cadence):
    log, _ = demo_retention_log()
    with pytest.raises(ReplayConsistencyError):
        build_replay_masks(_mutate(log, edits=edits), length, cadence=cadence)


def test_hundred_random_trajectories_replay_exactly(params):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(10, 129))
        cadence = int(rng.integers(4, 33))
        b = int(rng.integers(1, cadence + 1))
        w = int(rng.integers(0, min(cadence, 4)))
        log = random_log(rng, CFG.n_layers, t, cadence, b, w)
        toks = rng.integers(0, CFG.vocab_size, t)
        replay = forward_masked(params, CFG, toks, build_replay_masks(log, t, cadence))[0].values
        inc = decode_with_log(params, CFG, toks, log)
        worst = max(worst, float(np.max(np.abs(inc - replay))))
    assert worst < 1e-9


def _rollout(params, seed, rate=0.5, cadence=10, **kw):
    ecfg = EvictionConfig(cadence=cadence, rate=rate, block_size=2, window=2, n_layers=CFG.n_layers)
    prompt = list(np.random.default_rng(seed).integers(1, CFG.vocab_size, 6))
    traj = generate(params, CFG, prompt, ecfg, max_new=30, eos_id=CFG.vocab_size, seed=seed, return_logits=True, **kw)
    return traj, ecfg


def test_rollout_logits_and_logprobs_replay(params):
    for seed in range(5):
        traj, ecfg = _rollout(params, seed)
        assert traj.log.n_rounds > 0
        res = replay_forward(params, CFG, traj.tokens, traj.log, traj.prompt_len, ecfg, check_tol=1e-9)
        roll = traj.meta["logits"]
        replay = res.logits.values[traj.prompt_len - 1 : len(traj.tokens) - 1]
        assert np.max(np.abs(roll - replay)) < 1e-9
        stored = [r.logprob for r in traj.log.records]
        recomputed = [lp.item() for layer in res.round_logprobs for lp in layer]
        by_layer = sorted(traj.log.records, key=lambda r: (r.layer, r.round))
        assert np.allclose([r.logprob for r in by_layer], recomputed, atol=1e-9, rtol=0)
        assert len(stored) == len(recomputed)


def test_no_eviction_replay_is_teacher_forcing(params):
    traj, ecfg = _rollout(params, 9, rate=0.0)
    res = replay_forward(params, CFG, traj.tokens, traj.log, traj.prompt_len, ecfg)
    logits = forward_masked(params, CFG, traj.tokens)[0].values
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    idx = np.arange(traj.prompt_len - 1, len(traj.tokens) - 1)
    assert np.allclose(res.token_logprobs.values, logp[idx, np.asarray(traj.tokens)[idx + 1]], atol=1e-12)
    assert res.round_logprobs == [[], []]


def test_tampered_logprob_is_detected(params):
    traj, ecfg = _rollout(params, 3)
    traj.log.records[0].logprob += 1e-3
    with pytest.raises(ReplayConsistencyError):
        replay_forward(params, CFG, traj.tokens, traj.log, traj.prompt_len, ecfg)


def test_round_logprob_is_on_the_graph(params):
    traj, ecfg = _rollout(params, 4)
    res = replay_forward(params, CFG, traj.tokens, traj.log, traj.prompt_len, ecfg)
    res.round_logprobs[0][0].backward()
    assert np.any(params["l0.wk"].grad != 0) and np.any(params["l0.wq"].grad != 0)
    # a perturbation of one W_k entry moves the recomputed value
    for t in params.values():
        t.grad = None
    base = res.round_logprobs[0][0].item()
    params["l0.wk"].values[0, 0] += 1e-3
    try:
        moved = replay_forward(params, CFG, traj.tokens, traj.log, traj.prompt_len, ecfg, check_tol=None)
    finally:
        params["l0.wk"].values[0, 0] -= 1e-3
    assert moved.round_logprobs[0][0].item() != base


def test_batch_replay_matches_single(params):
    items, singles = [], []
    for seed in range(4):
        traj, ecfg = _rollout(params, seed)
        items.append((traj.tokens, traj.log, traj.prompt_len))
        singles.append(replay_forward(params, CFG, traj.tokens, traj.log, traj.prompt_len, ecfg))
    batched = replay_batch(params, CFG, items, ecfg)
    for a, b in zip(batched, singles):
        assert np.allclose(a.token_logprobs.values, b.token_logprobs.values, atol=1e-12)
        for la, lb in zip(a.round_logprobs, b.round_logprobs):
            assert np.allclose([x.item() for x in la], [x.item() for x in lb], atol=1e-12)


def test_causal_batch_ignores_evictions(params):
    traj, ecfg = _rollout(params, 6)
    (res,) = replay_batch(params, CFG, [(traj.tokens, traj.log, traj.prompt_len)], ecfg, causal=True, with_rounds=False)
    logits = forward_masked(params, CFG, traj.tokens)[0].values
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    idx = np.arange(traj.prompt_len - 1, len(traj.tokens) - 1)
    assert np.allclose(res.token_logprobs.values, logp[idx, np.asarray(traj.tokens)[idx + 1]], atol=1e-12)


def test_log_survives_jsonl(params):
    traj, ecfg = _rollout(params, 8)
    buf = io.StringIO()
    traj.log.dump(buf)
    back = RetentionLog.load(io.StringIO(buf.getvalue()), CFG.n_layers)
    a = build_replay_masks(traj.log, len(traj.tokens))
    b = build_replay_masks(back, len(traj.tokens))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_replay_token_logprobs_use_sampling_temperature(params):
    traj, ecfg = _rollout(params, 2)
    base = replay_forward(params, CFG, traj.tokens, traj.log, traj.prompt_len, ecfg)
    hot = replay_forward(params, CFG, traj.tokens, traj.log, traj.prompt_len, ecfg, temperature=0.5)
    z = base.logits.values[traj.prompt_len - 1 : len(traj.tokens) - 1] / 0.5
    logp = z - np.log(np.exp(z - z.max(-1, keepdims=True)).sum(-1, keepdims=True)) - z.max(-1, keepdims=True)
    picked = logp[np.arange(len(z)), np.asarray(traj.tokens)[traj.prompt_len :]]
    assert np.allclose(hot.token_logprobs.values, picked, atol=1e-12)
    # eviction log-probs do not depend on the token temperature
    assert [x.item() for x in hot.round_logprobs[0]] == [x.item() for x in base.round_logprobs[0]]
    (batched,) = replay_batch(params, CFG, [(traj.tokens, traj.log, traj.prompt_len)], ecfg, temperature=0.5)
    assert np.allclose(batched.token_logprobs.values, picked, atol=1e-12)
