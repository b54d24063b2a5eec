import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swapsim.profiler import (
    SWAP_IN,
    SWAP_OUT,
    DetailedRecord,
    ProfilerError,
    ProfilerState,
    Stage,
    SwapEvent,
    adjust_stage,
    compare_sequences,
    load_detailed,
    no_swap_usage,
    reconstruct_memory,
    save_detailed,
)
from swapsim.runtime import SimConfig, run_iteration, unbounded
from swapsim.trace import TraceFormatError, WorkloadSpec, generate_trace

from conftest import random_plan

SEQ = [1, 2, 3, 4, 5] * 8
CHANGED = SEQ + [9] * 4  # 10% longer


def _expected(stage: Stage, step: int, changed: bool, m: int, n: int) -> tuple[Stage, int]:
    """Transition table written out by hand."""
    if changed:
        return Stage.WARMUP, 0
    step += 1
    if stage is Stage.WARMUP:
        return (Stage.GENPOLICY, 0) if step > m else (Stage.WARMUP, step)
    if stage is Stage.GENPOLICY:
        return (Stage.STABLE, step) if step > n else (Stage.GENPOLICY, step)
    return Stage.STABLE, step


def test_stage_machine_exhaustive():
    m, n = 2, 5
    for stage, step, changed in itertools.product(Stage, range(n + 3), (False, True)):
        st_ = ProfilerState(m=m, n=n, prev_token_seq=list(SEQ), stable_step=step, prev_stage=stage)
        got = adjust_stage(st_, CHANGED if changed else SEQ)
        want_stage, want_step = _expected(stage, step, changed, m, n)
        assert (got, st_.stable_step) == (want_stage, want_step), (stage, step, changed)
        assert st_.prev_stage is got
        assert not (stage is Stage.WARMUP and got is Stage.STABLE)


def test_first_call_initializes_to_warmup():
    st_ = ProfilerState()
    assert adjust_stage(st_, SEQ) is Stage.WARMUP
    assert st_.stable_step == 1 and st_.prev_token_seq == SEQ


def test_three_stable_calls_reach_genpolicy():
    st_ = ProfilerState(m=2, n=5)
    stages = [adjust_stage(st_, SEQ) for _ in range(3)]
    assert stages == [Stage.WARMUP, Stage.WARMUP, Stage.GENPOLICY]


def test_genpolicy_held_until_step_exceeds_n():
    st_ = ProfilerState(m=2, n=5, prev_token_seq=list(SEQ), prev_stage=Stage.GENPOLICY)
    stages = [adjust_stage(st_, SEQ) for _ in range(6)]
    assert stages == [Stage.GENPOLICY] * 5 + [Stage.STABLE]


def test_longer_sequence_resets_from_any_stage():
    for stage in Stage:
        st_ = ProfilerState(prev_token_seq=list(SEQ), stable_step=4, prev_stage=stage)
        assert adjust_stage(st_, CHANGED) is Stage.WARMUP
        assert st_.stable_step == 0


def test_compare_sequences_examples():
    d = compare_sequences(SEQ, SEQ)
    assert (d.len_diff_fraction, d.cosine_similarity) == (0.0, 1.0)
    assert compare_sequences([1, 2, 3], [1, 2, 3, 4]).len_diff_fraction == 0.25
    d = compare_sequences([1, 1, 2, 2], [1, 1, 2])
    assert d.cosine_similarity == pytest.approx(6 / (math.sqrt(8) * math.sqrt(5)))
    assert d.cosine_similarity == pytest.approx(0.9487, abs=1e-4)
    with pytest.raises(ProfilerError):
        compare_sequences([], [1])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=30), st.lists(st.integers(0, 6), min_size=1, max_size=30))
def test_compare_sequences_symmetric_and_bounded(a, b):
    x, y = compare_sequences(a, b), compare_sequences(b, a)
    assert x.len_diff_fraction == y.len_diff_fraction
    assert x.cosine_similarity == pytest.approx(y.cosine_similarity)
    assert 0 <= x.len_diff_fraction <= 1 and 0 <= x.cosine_similarity <= 1


def test_lightweight_state_is_one_sequence_plus_counters():
    st_ = ProfilerState()
    for _ in range(10):
        adjust_stage(st_, SEQ)
    seqs = [v for v in vars(st_).values() if isinstance(v, list)]
    assert seqs == [SEQ]


def _tiny_record(events):
    tr = generate_trace(WorkloadSpec(layers=1, ops_per_layer=4, wgrad_per_layer=0), 0)
    return DetailedRecord(tr, np.full(len(tr.ops), 50), 10.0, events)


def test_reconstruct_no_swaps_is_identity():
    rec = _tiny_record([])
    np.testing.assert_array_equal(reconstruct_memory(rec).actual_usage, rec.live_memory)


def test_reconstruct_adds_back_swapped_bytes():
    rec = _tiny_record([SwapEvent(2, 0, 30, SWAP_OUT), SwapEvent(5, 0, 30, SWAP_IN)])
    usage = reconstruct_memory(rec).actual_usage
    assert usage[1] == 50 and usage[2] == 80 and usage[4] == 80 and usage[5] == 50


def test_reconstruct_rejects_unpaired_swap_in():
    with pytest.raises(ProfilerError):
        reconstruct_memory(_tiny_record([SwapEvent(1, 0, 30, SWAP_IN)]))


def test_reconstruct_is_order_independent():
    evs = [SwapEvent(1, 0, 30, SWAP_OUT), SwapEvent(3, 0, 30, SWAP_IN),
           SwapEvent(2, 1, 7, SWAP_OUT), SwapEvent(6, 1, 7, SWAP_IN)]
    a = reconstruct_memory(_tiny_record(evs)).actual_usage
    b = reconstruct_memory(_tiny_record([evs[2], evs[0], evs[3], evs[1]])).actual_usage
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(2, 8))
def test_reconstruction_matches_never_swapping_replay(seed, layers, opl):
    rng = np.random.default_rng(seed)
    spec = WorkloadSpec(layers=layers, ops_per_layer=opl, activation_size=1024, rng_seed=seed)
    tr = generate_trace(spec, 0)
    cfg = unbounded(SimConfig(memory_budget=1, bandwidth=float(rng.uniform(10, 1e4))), tr)
    swapped = run_iteration(tr, random_plan(tr, rng), cfg)
    plain = run_iteration(tr, None, cfg)
    rec = DetailedRecord(tr, swapped.live_memory, swapped.metrics.step_time, swapped.swap_events)
    np.testing.assert_array_equal(reconstruct_memory(rec).actual_usage, plain.live_memory)
    np.testing.assert_array_equal(plain.live_memory, no_swap_usage(tr))


def test_detailed_record_round_trip_and_truncation():
    rec = _tiny_record([SwapEvent(1, 0, 30, SWAP_OUT), SwapEvent(3, 0, 30, SWAP_IN)])
    data = save_detailed(rec)
    back = load_detailed(data)
    assert back.swap_events == rec.swap_events
    np.testing.assert_array_equal(back.live_memory, rec.live_memory)
    assert save_detailed(back) == data
    with pytest.raises(TraceFormatError):
        load_detailed(data[: data.rindex(b"{")])
