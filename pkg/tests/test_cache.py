import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ngc import cache as C
from ngc.cache import CacheState, EvictionConfig


def filled_state(n_tokens, n_layers=2, heads=1, dh=2):
    state = CacheState.empty(n_layers, heads, dh)
    for t in range(n_tokens):
        kv = [np.full((heads, dh), float(t)) for _ in range(n_layers)]
        state.append(kv, kv)
    return state


def brute_force_peak(p, c, eps, delta, b, layers, window=0):
    """Token-by-token list simulation, independent of cache.peak_occupancy."""
    alive = []
    peak = 0
    rounds = 0
    since = 0
    for t in range(p + c):
        if eps > 0 and ((rounds == 0 and t >= delta) or (rounds and since >= delta)):
            cand = alive[: len(alive) - window]
            blocks = [cand[i : i + b] for i in range(0, len(cand), b)]
            x = (1 - eps) * len(blocks)
            k = max(1, int(np.floor(round(x, 9) + 0.5)))
            keep = sorted(sorted(blocks, key=len, reverse=True)[:k], key=lambda blk: blk[0])
            alive = [i for blk in keep for i in blk] + alive[len(cand) :]
            rounds += 1
            since = 0
        alive.append(t)
        since += 1
        peak = max(peak, len(alive))
    return layers * peak


class TestShouldFire:
    def test_first_round_counts_prefill(self):
        cfg = EvictionConfig(cadence=256, rate=0.5, block_size=32, window=5)
        state = filled_state(10 + 246, n_layers=1)
        assert C.should_fire(state, cfg)

    def test_not_before_cadence_after_a_round(self):
        cfg = EvictionConfig(cadence=8, rate=0.5, block_size=2, window=1)
        state = filled_state(8, n_layers=1)
        state.rounds_fired = 1
        state.tokens_since_round = 7
        assert not C.should_fire(state, cfg)

    def test_cadence_one_fires_every_token(self):
        cfg = EvictionConfig(cadence=1, rate=0.5, block_size=1, window=0)
        state = filled_state(1, n_layers=1)
        assert C.should_fire(state, cfg)
        state.rounds_fired, state.tokens_since_round = 3, 1
        assert C.should_fire(state, cfg)


@pytest.mark.parametrize(
    "t,b,sizes",
    [(10, 4, [4, 4, 2]), (32, 32, [32]), (256, 32, [32] * 8)],
)
def test_partition_blocks(t, b, sizes):
    part = C.partition_blocks(t, b)
    assert C.block_sizes(part) == sizes
    assert part[0][0] == 0 and part[-1][1] == t
    assert all(a[1] == b_[0] for a, b_ in zip(part, part[1:]))


@pytest.mark.parametrize("n,eps,k", [(8, 0.5, 4), (3, 0.5, 2), (1, 0.9, 1), (1, 0.5, 1), (5, 0.7, 2), (4, 1.0, 1)])
def test_keep_count(n, eps, k):
    assert C.keep_count(n, eps) == k


def test_keep_count_half_up_steady_state_within_one_block():
    sizes = C.pre_round_sizes(cadence=96, rate=0.5, block_size=32, rounds=30)
    assert abs(sizes[-1] - 96 / 0.5) <= 32


class TestApplyRetention:
    def test_keep_all_is_identity(self):
        state = filled_state(6, n_layers=1)
        part = C.partition_blocks(6, 2)
        C.apply_retention(state, 0, part, [0, 1, 2])
        assert state.layers[0].index.tolist() == list(range(6))

    def test_keep_none_rejected(self):
        state = filled_state(6, n_layers=1)
        with pytest.raises(ValueError):
            C.apply_retention(state, 0, C.partition_blocks(6, 2), [])

    def test_duplicate_and_out_of_range_rejected(self):
        state = filled_state(6, n_layers=1)
        part = C.partition_blocks(6, 2)
        with pytest.raises(ValueError):
            C.apply_retention(state, 0, part, [0, 0])
        with pytest.raises(ValueError):
            C.apply_retention(state, 0, part, [3])

    def test_two_round_demo_first_round(self):
        state = filled_state(5, n_layers=1)
        C.apply_retention(state, 0, C.partition_blocks(5, 1), [4, 0, 2])
        assert state.layers[0].index.tolist() == [0, 2, 4]
        assert state.layers[0].keys[:, 0, 0].tolist() == [0.0, 2.0, 4.0]

    def test_window_entries_always_survive(self):
        state = filled_state(7, n_layers=1)
        C.apply_retention(state, 0, C.partition_blocks(5, 2), [1], window=2)
        assert state.layers[0].index.tolist() == [2, 3, 5, 6]

    def test_other_layers_untouched(self):
        state = filled_state(6, n_layers=3)
        before = [l.index.copy() for l in state.layers]
        C.apply_retention(state, 1, C.partition_blocks(6, 2), [2])
        assert state.layers[0].index.tolist() == before[0].tolist()
        assert state.layers[2].index.tolist() == before[2].tolist()
        with pytest.raises(C.CacheStateError):
            C.finish_round(state)


class TestSteadyState:
    def test_half_rate_doubles_cadence(self):
        assert C.steady_state_size(256, 0.5, 1) == 512

    def test_full_eviction(self):
        assert C.steady_state_size(64, 1.0, 3) == 3 * 64

    def test_zero_rate_is_unbounded(self):
        with pytest.raises(ValueError):
            C.steady_state_size(64, 0.0)

    def test_recursion_oracle(self):
        c = 256.0
        for _ in range(50):
            c = 0.5 * c + 256
        assert abs(c - C.steady_state_size(256, 0.5)) < 1

    @pytest.mark.parametrize("eps", [0.25, 0.5, 0.75, 1.0])
    @pytest.mark.parametrize("delta", [64, 256])
    def test_block_rounded_convergence(self, eps, delta):
        sizes = C.pre_round_sizes(delta, eps, 32, 50)
        assert abs(sizes[-1] - delta / eps) <= 32


class TestPeakOccupancy:
    def test_no_eviction(self):
        assert C.peak_occupancy(10, 1014, 0.0, 256, 32, n_layers=2) == 2 * 1024

    def test_long_completion_fixture(self):
        # 256 -> keep 128, +256 = 384 -> keep 192, +256 = 448 -> keep 224, +256 = 480
        assert C.peak_occupancy(10, 1014, 0.5, 256, 32) == 480
        assert brute_force_peak(10, 1014, 0.5, 256, 32, 1) == 480

    @settings(max_examples=60, deadline=None)
    @given(
        p=st.integers(1, 30),
        c=st.integers(0, 300),
        eps=st.sampled_from([0.25, 0.5, 0.75, 1.0]),
        delta=st.sampled_from([32, 48, 64]),
        b=st.sampled_from([1, 4, 16, 32]),
        window=st.sampled_from([0, 3]),
    )
    def test_matches_brute_force(self, p, c, eps, delta, b, window):
        assert C.peak_occupancy(p, c, eps, delta, b, 2, window) == brute_force_peak(p, c, eps, delta, b, 2, window)

    def test_nonincreasing_in_rate(self):
        for c in (100, 500, 1014):
            peaks = [C.peak_occupancy(10, c, e, 64, 16) for e in (0.0, 0.25, 0.5, 0.75, 1.0)]
            assert all(a >= b for a, b in zip(peaks, peaks[1:]))


def test_retention_log_jsonl_roundtrip():
    log = C.RetentionLog(2)
    log.append(C.RoundRecord(0, 0, [0, 1, 2, 3, 4], [2, 2], [1], -0.5))
    log.append(C.RoundRecord(1, 0, [0, 1, 2, 3, 4], [2, 2], [0], -0.25))
    buf = io.StringIO()
    log.dump(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == (
        '{"layer": 0, "round": 0, "alive_indices": [0, 1, 2, 3, 4], '
        '"block_sizes": [2, 2], "kept_blocks": [1], "logprob": -0.5}'
    )
    back = C.RetentionLog.load(io.StringIO(buf.getvalue()), 2)
    assert back.records == log.records
    assert log.records[0].kept_indices() == [2, 3, 4]
    assert log.records[0].position == 5


def test_sorted_and_permanent_under_random_rounds(rng):
    cfg = EvictionConfig(cadence=6, rate=0.5, block_size=2, window=1, n_layers=2)
    state = CacheState.empty(2, 1, 2)
    evicted = [set(), set()]
    for t in range(60):
        if C.should_fire(state, cfg):
            parts = [C.partition_blocks(C.candidate_count(len(lc), cfg.window), cfg.block_size) for lc in state.layers]
            k = C.keep_count(min(map(len, parts)), cfg.rate)
            for layer, lc in enumerate(state.layers):
                part = parts[layer]
                kept = rng.choice(len(part), size=k, replace=False)
                before = set(lc.index.tolist())
                C.apply_retention(state, layer, part, kept, window=cfg.window)
                evicted[layer] |= before - set(lc.index.tolist())
            C.finish_round(state, cfg.block_size)
        kv = [np.zeros((1, 2))] * 2
        state.append(kv, kv)
        state.check()
        for layer, lc in enumerate(state.layers):
            assert not evicted[layer] & set(lc.index.tolist())
    assert state.peak_entries_per_layer >= max(state.alive_counts())
