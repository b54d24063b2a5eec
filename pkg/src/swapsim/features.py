"""Integer-only tensor features used to re-identify tensors across iterations.

A tensor's feature is updated every time an operator touches it:

* ``op_count``   -- number of uses so far
* ``op_tag``     -- OR of one-hot bits of the 32 most frequent operators
* ``dtype``      -- element type code
* ``op_call_stack`` -- last 8 operator indices, 8 bits each, newest lowest

Operator bits and indices come from token frequencies of the profiled
iteration (:class:`FeatureTables`).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .trace import IterationTrace

TAG_BITS = 32
INDEX_SLOTS = 255  # index 0 is reserved for operators unseen while profiling
STACK_DEPTH = 8
MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class TensorFeature:
    op_count: int = 0
    op_tag: int = 0
    dtype: int = 0
    op_call_stack: int = 0

    def key(self) -> tuple[int, int, int, int]:
        return (self.op_count, self.op_tag, self.dtype, self.op_call_stack)

    @classmethod
    def from_key(cls, key: Sequence[int]) -> "TensorFeature":
        return cls(*(int(k) for k in key))


@dataclass(frozen=True)
class FeatureTables:
    """token -> one-hot bit (top 32 only) and token -> 8-bit frequency index."""

    bit: dict[int, int]
    index: dict[int, int]

    @classmethod
    def from_tokens(cls, tokens: Sequence[int]) -> "FeatureTables":
        freq = Counter(int(t) for t in tokens)
        ranked = sorted(freq, key=lambda t: (-freq[t], t))
        bit = {tok: 1 << r for r, tok in enumerate(ranked[:TAG_BITS])}
        index = {tok: r + 1 for r, tok in enumerate(ranked[:INDEX_SLOTS])}
        return cls(bit, index)

    def arrays(self, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
        size = max([vocab_size, *(t + 1 for t in self.index)])
        tok_bit = np.zeros(size, dtype=np.int64)
        tok_idx = np.zeros(size, dtype=np.int64)
        for t, b in self.bit.items():
            tok_bit[t] = b
        for t, i in self.index.items():
            tok_idx[t] = i
        return tok_bit, tok_idx

    def to_dict(self) -> dict:
        return {
            "bit": sorted([t, b.bit_length() - 1] for t, b in self.bit.items()),
            "index": sorted([t, i] for t, i in self.index.items()),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureTables":
        return cls({int(t): 1 << int(b) for t, b in data["bit"]}, {int(t): int(i) for t, i in data["index"]})


def update_feature(f: TensorFeature, op_token: int, tables: FeatureTables) -> TensorFeature:
    return TensorFeature(
        f.op_count + 1,
        f.op_tag | tables.bit.get(op_token, 0),
        f.dtype,
        ((f.op_call_stack << 8) + tables.index.get(op_token, 0)) & MASK64,
    )


@dataclass
class FeatureStates:
    """Feature state after every (op, tensor) touch, in dispatch order."""

    op: np.ndarray
    tensor: np.ndarray
    slot: np.ndarray
    op_count: np.ndarray
    op_tag: np.ndarray
    dtype: np.ndarray
    op_call_stack: np.ndarray

    def __len__(self) -> int:
        return len(self.op)

    def keys(self) -> list[tuple[int, int, int, int]]:
        return list(
            zip(self.op_count.tolist(), self.op_tag.tolist(), self.dtype.tolist(), self.op_call_stack.tolist())
        )

    def ordinals(self) -> list[int]:
        """How many earlier touches reached the same feature key."""
        seen: Counter = Counter()
        out = []
        for k in self.keys():
            out.append(seen[k])
            seen[k] += 1
        return out


def feature_states(trace: IterationTrace, tables: FeatureTables, impl=None) -> FeatureStates:
    """Replay feature updates for every tensor touched in ``trace``.

    Each op touches its inputs, then its outputs.
    """
    ids = sorted(trace.tensors)
    dense = {tid: i for i, tid in enumerate(ids)}
    ops, tens, slots, toks = [], [], [], []
    for op in trace.ops:
        for s, tid in enumerate(op.inputs + op.outputs):
            ops.append(op.op_index)
            tens.append(tid)
            slots.append(s)
            toks.append(op.op_token)
    tens_arr = np.asarray(tens, dtype=np.int64)
    dense_arr = np.asarray([dense[t] for t in tens], dtype=np.int64)
    dtypes = np.asarray([int(trace.tensors[t].dtype) for t in ids], dtype=np.int64)
    vocab = max(toks, default=0) + 1
    tok_bit, tok_idx = tables.arrays(vocab)
    count, tag, stack = kernels.feature_stream(dense_arr, toks, dtypes, tok_bit, tok_idx, impl=impl)
    return FeatureStates(
        op=np.asarray(ops, dtype=np.int64),
        tensor=tens_arr,
        slot=np.asarray(slots, dtype=np.int64),
        op_count=count,
        op_tag=tag,
        dtype=dtypes[dense_arr] if len(dense_arr) else np.zeros(0, dtype=np.int64),
        op_call_stack=stack,
    )
