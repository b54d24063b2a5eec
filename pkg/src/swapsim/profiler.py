"""Lightweight/detailed profiling, stage adjustment and memory reconstruction.

Lightweight mode keeps only the token sequence of the last iteration plus a
couple of counters.  Detailed mode additionally records per-op live memory,
the iteration duration and the swaps that happened, which is everything the
policy generator needs.  Per-op execution times are deliberately absent.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Sequence

import numpy as np

from . import kernels
from .features import FeatureStates, FeatureTables, feature_states
from .trace import (
    IterationTrace,
    TraceError,
    TraceFormatError,
    iter_json_lines,
    load_trace,
    save_trace,
)

LEN_THRESHOLD = 0.05
COS_THRESHOLD = 0.95


class Stage(str, Enum):
    WARMUP = "WarmUp"
    GENPOLICY = "GenPolicy"
    STABLE = "Stable"


class ProfilerError(ValueError):
    pass


@dataclass(frozen=True)
class SequenceDiff:
    len_diff_fraction: float
    cosine_similarity: float

    def unchanged(self, len_threshold=LEN_THRESHOLD, cos_threshold=COS_THRESHOLD) -> bool:
        return self.len_diff_fraction < len_threshold and self.cosine_similarity > cos_threshold


def compare_sequences(a: Sequence[int], b: Sequence[int]) -> SequenceDiff:
    """Length difference and cosine similarity of token-count histograms."""
    if len(a) == 0 or len(b) == 0:
        raise ProfilerError("compare_sequences needs non-empty sequences")
    len_diff = abs(len(a) - len(b)) / max(len(a), len(b))
    ha, hb = Counter(a), Counter(b)
    dot = sum(c * hb.get(t, 0) for t, c in ha.items())
    na2 = sum(c * c for c in ha.values())
    nb2 = sum(c * c for c in hb.values())
    # one sqrt of an exact integer product keeps identical inputs at exactly 1.0
    cos = min(1.0, max(0.0, dot / math.sqrt(na2 * nb2)))
    return SequenceDiff(len_diff, cos)


@dataclass
class ProfilerState:
    """Stage-machine state; lightweight mode stores nothing else per iteration."""

    m: int = 2
    n: int = 5
    len_threshold: float = LEN_THRESHOLD
    cos_threshold: float = COS_THRESHOLD
    prev_token_seq: list[int] | None = None
    stable_step: int = 0
    prev_stage: Stage = Stage.WARMUP

    def __post_init__(self):
        if self.m < 0 or self.n < 0:
            raise ProfilerError("m and n must be >= 0")

    @property
    def detailed(self) -> bool:
        """Whether the next iteration has to be profiled in detailed mode."""
        return self.prev_stage is Stage.GENPOLICY


def adjust_stage(state: ProfilerState, seq: Sequence[int]) -> Stage:
    """One step of the stage machine; mutates ``state`` and returns the new stage."""
    seq = list(seq)
    if state.prev_token_seq is None:
        state.prev_token_seq = seq
        state.prev_stage = Stage.WARMUP
    diff = compare_sequences(seq, state.prev_token_seq)
    if diff.unchanged(state.len_threshold, state.cos_threshold):
        state.stable_step += 1
        stage = state.prev_stage
        if stage is Stage.WARMUP and state.stable_step > state.m:
            stage = Stage.GENPOLICY
            state.stable_step = 0
        elif stage is Stage.GENPOLICY and state.stable_step > state.n:
            stage = Stage.STABLE
    else:
        stage = Stage.WARMUP
        state.stable_step = 0
    state.prev_stage = stage
    state.prev_token_seq = seq
    return stage


# ---------------------------------------------------------------------------
# Detailed records
# ---------------------------------------------------------------------------

SWAP_OUT = "out"
SWAP_IN = "in"
SWAP_DROP = "drop"  # tensor died while off device; no copy back


@dataclass(frozen=True)
class SwapEvent:
    """A swap observed during an iteration.

    An ``out`` event at op ``i`` means the device block was released before
    op ``i`` allocated; ``in`` means the tensor was back on device for op ``i``;
    ``drop`` means it stopped being live from op ``i`` on without returning.
    """

    op_index: int
    tensor_id: int
    size: int
    direction: str
    kind: str = "policy"

    def to_json(self) -> dict:
        return {"op": self.op_index, "tid": self.tensor_id, "size": self.size, "dir": self.direction, "kind": self.kind}

    @classmethod
    def from_json(cls, obj: dict) -> "SwapEvent":
        return cls(int(obj["op"]), int(obj["tid"]), int(obj["size"]), str(obj["dir"]), str(obj.get("kind", "policy")))


@dataclass
class DetailedRecord:
    trace: IterationTrace
    live_memory: np.ndarray
    iteration_duration: float
    swap_events: list[SwapEvent] = field(default_factory=list)

    def __post_init__(self):
        self.live_memory = np.asarray(self.live_memory, dtype=np.int64)
        if len(self.live_memory) != len(self.trace.ops):
            raise ProfilerError("live_memory must have one entry per op")
        if (self.live_memory < 0).any():
            raise ProfilerError("live_memory_bytes must be >= 0")
        if self.iteration_duration < 0:
            raise ProfilerError("iteration_duration must be >= 0")

    @cached_property
    def tables(self) -> FeatureTables:
        return FeatureTables.from_tokens(self.trace.tokens())

    @cached_property
    def features(self) -> FeatureStates:
        """Per-touch feature snapshots (inputs then outputs of every op)."""
        return feature_states(self.trace, self.tables)


@dataclass
class MemoryTimeline:
    actual_usage: np.ndarray

    def __len__(self) -> int:
        return len(self.actual_usage)

    @property
    def peak(self) -> int:
        return int(self.actual_usage.max()) if len(self.actual_usage) else 0


def reconstruct_memory(detailed: DetailedRecord) -> MemoryTimeline:
    """Add back every tensor that was off device at each op."""
    n = len(detailed.trace.ops)
    delta = np.zeros(n + 1, dtype=np.int64)
    away: dict[int, int] = {}
    for ev in detailed.swap_events:
        if not 0 <= ev.op_index <= n:
            raise ProfilerError(f"swap event at op {ev.op_index} outside [0, {n}]")
        if ev.direction == SWAP_OUT:
            if ev.tensor_id in away:
                raise ProfilerError(f"tensor {ev.tensor_id} swapped out twice")
            away[ev.tensor_id] = ev.size
            delta[ev.op_index] += ev.size
        elif ev.direction in (SWAP_IN, SWAP_DROP):
            if away.pop(ev.tensor_id, None) is None:
                raise ProfilerError(f"swap-in of tensor {ev.tensor_id} without prior swap-out")
            delta[ev.op_index] -= ev.size
        else:
            raise ProfilerError(f"unknown swap direction {ev.direction!r}")
    return MemoryTimeline(detailed.live_memory + np.cumsum(delta)[:n])


def no_swap_usage(trace: IterationTrace, base: int = 0) -> np.ndarray:
    """Analytic live bytes per op when nothing is ever swapped."""
    life = trace.lifetimes()
    ids = list(life)
    return kernels.live_bytes(
        [life[t][0] for t in ids],
        [life[t][1] for t in ids],
        [trace.tensors[t].size for t in ids],
        len(trace.ops),
        base,
    )


# JSON lines: the trace lines, then one "record" line, then one line per swap event.

RECORD_FORMAT = "swapsim-detailed"


def save_detailed(rec: DetailedRecord) -> bytes:
    meta = {
        "format": RECORD_FORMAT,
        "iteration_duration": rec.iteration_duration,
        "live_memory": rec.live_memory.tolist(),
        "n_swaps": len(rec.swap_events),
    }
    lines = [json.dumps(meta, separators=(",", ":"), sort_keys=True)]
    lines += [json.dumps(e.to_json(), separators=(",", ":"), sort_keys=True) for e in rec.swap_events]
    return save_trace(rec.trace) + ("\n".join(lines) + "\n").encode("utf-8")


def load_detailed(data: bytes) -> DetailedRecord:
    # split at the record header line; everything above is a plain trace
    marker = b'{"format":"' + RECORD_FORMAT.encode() + b'"'
    pos = data.find(b"\n" + marker)
    if pos < 0:
        raise TraceFormatError("missing detailed-record section", len(data))
    trace = load_trace(data[: pos + 1])
    events: list[SwapEvent] = []
    meta = None
    for off, obj in iter_json_lines(data[pos + 1 :]):
        if meta is None:
            meta = obj
            continue
        try:
            events.append(SwapEvent.from_json(obj))
        except (KeyError, TypeError, ValueError) as e:
            raise TraceFormatError(f"bad swap event: {e!r}", pos + 1 + off) from None
    try:
        if len(events) != int(meta["n_swaps"]):
            raise TraceFormatError("swap event count mismatch (truncated?)", len(data))
        return DetailedRecord(trace, np.asarray(meta["live_memory"], dtype=np.int64),
                              float(meta["iteration_duration"]), events)
    except (KeyError, TypeError, ProfilerError, TraceError) as e:
        if isinstance(e, TraceFormatError):
            raise
        raise TraceFormatError(f"bad detailed record: {e}", pos + 1) from None
