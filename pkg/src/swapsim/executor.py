"""Apply a swap policy to a new iteration.

Tensor ids of a fresh iteration carry no link to the profiled one, so policy
items are found again by their feature (see :mod:`swapsim.features`): while
ops are dispatched every touched tensor's feature is updated, and a tensor
whose feature equals an item's stored feature is that item's tensor.  When
several touches reach the same feature, the n-th one pairs with the item
recorded as the n-th occurrence.

The fixed-index matcher keyed by ``(op_index, slot)`` is kept as a baseline.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .features import FeatureTables, TensorFeature, feature_states, update_feature
from .policy import PolicyItem, SwapPolicy
from .trace import IterationTrace

__all__ = [
    "CommandPlan",
    "FixedIndexMatcher",
    "FuzzyMatcher",
    "MatchDiagnostics",
    "MatchIndex",
    "SwapIn",
    "SwapOut",
    "TensorFeature",
    "drive_iteration",
    "match_tensor",
    "update_feature",
]


@dataclass(frozen=True)
class SwapOut:
    tensor_id: int
    free_at: int
    item: int = -1


@dataclass(frozen=True)
class SwapIn:
    tensor_id: int
    item: int = -1


@dataclass
class MatchDiagnostics:
    items: int = 0
    matched: int = 0
    stale: int = 0
    collisions: int = 0
    mismatches: int = 0
    mismatch_items: list[int] = field(default_factory=list)

    @property
    def match_rate(self) -> float:
        return self.matched / self.items if self.items else 1.0

    def to_dict(self) -> dict:
        return {
            "match_items": self.items,
            "match_matched": self.matched,
            "match_stale": self.stale,
            "match_collisions": self.collisions,
            "match_mismatches": self.mismatches,
            "match_rate": self.match_rate,
        }


@dataclass
class CommandPlan:
    """Swap commands keyed by op index.

    ``before[i]`` runs ahead of op ``i``'s allocations, ``after[i]`` right
    after op ``i`` is dispatched.
    """

    n_ops: int
    before: dict[int, list[SwapIn]] = field(default_factory=dict)
    after: dict[int, list[SwapOut]] = field(default_factory=dict)
    diagnostics: MatchDiagnostics = field(default_factory=MatchDiagnostics)

    @classmethod
    def empty(cls, n_ops: int) -> "CommandPlan":
        return cls(n_ops)

    def add_out(self, op: int, cmd: SwapOut) -> None:
        if not 0 <= cmd.free_at < self.n_ops or cmd.free_at < op:
            raise ValueError(f"free_at {cmd.free_at} invalid for swap-out after op {op}")
        self.after.setdefault(op, []).append(cmd)

    def add_in(self, op: int, cmd: SwapIn) -> None:
        self.before.setdefault(op, []).append(cmd)

    def __len__(self) -> int:
        return sum(map(len, self.after.values())) + sum(map(len, self.before.values()))


class MatchIndex:
    """feature key -> {occurrence ordinal -> item position}."""

    def __init__(self, policy: SwapPolicy):
        self.tables: FeatureTables = policy.tables
        self.items: list[PolicyItem] = policy.items
        self.by_key: dict[tuple, dict[int, int]] = {}
        for pos, it in enumerate(policy.items):
            self.by_key.setdefault(tuple(it.key), {})[it.ordinal] = pos

    def lookup(self, key: tuple, ordinal: int = 0) -> int | None:
        hit = self.by_key.get(key)
        return None if hit is None else hit.get(ordinal)


def match_tensor(f: TensorFeature, index: MatchIndex, ordinal: int = 0) -> PolicyItem | None:
    pos = index.lookup(f.key(), ordinal)
    return None if pos is None else index.items[pos]


def _schedule(plan: CommandPlan, item: PolicyItem, pos: int, tid: int, op: int) -> None:
    n = plan.n_ops
    shift = op - item.swap_out_after  # ops inserted or removed ahead of the match
    free_at = min(max(item.free_at + shift, op), n - 1)
    plan.add_out(op, SwapOut(tid, free_at, pos))
    swap_in = item.swap_in_op + shift
    if op < swap_in < n:
        plan.add_in(swap_in, SwapIn(tid, pos))
    # otherwise the tensor comes back on demand at its next use


class FuzzyMatcher:
    name = "fuzzy"

    def plan(self, trace: IterationTrace, policy: SwapPolicy, index: MatchIndex | None = None) -> CommandPlan:
        index = index or MatchIndex(policy)
        plan = CommandPlan(len(trace.ops))
        diag = plan.diagnostics
        diag.items = len(policy.items)
        if not policy.items:
            return plan
        states = feature_states(trace, index.tables)
        seen: Counter = Counter()
        done_items: set[int] = set()
        done_tensors: set[int] = set()
        for key, op, tid in zip(states.keys(), states.op.tolist(), states.tensor.tolist()):
            ordinal = seen[key]
            seen[key] += 1
            pos = index.lookup(key, ordinal)
            if pos is None:
                continue
            if ordinal:
                diag.collisions += 1
            if pos in done_items or tid in done_tensors:
                continue
            done_items.add(pos)
            done_tensors.add(tid)
            _schedule(plan, index.items[pos], pos, tid, op)
        diag.matched = len(done_items)
        diag.stale = diag.items - diag.matched
        return plan


class FixedIndexMatcher:
    """Identifies a tensor by the op index that used it and its slot there."""

    name = "fixed"

    def plan(self, trace: IterationTrace, policy: SwapPolicy, index: MatchIndex | None = None) -> CommandPlan:
        plan = CommandPlan(len(trace.ops))
        diag = plan.diagnostics
        diag.items = len(policy.items)
        for pos, item in enumerate(policy.items):
            op_i, slot = item.fixed_key
            ok = op_i < len(trace.ops)
            if ok:
                op = trace.ops[op_i]
                touched = op.inputs + op.outputs
                ok = slot < len(touched)
            if ok:
                decl = trace.tensors[touched[slot]]
                ok = op.op_token == item.op_token and decl.size == item.size and int(decl.dtype) == item.dtype
            if not ok:
                diag.mismatches += 1
                diag.mismatch_items.append(pos)
                continue
            diag.matched += 1
            _schedule(plan, item, pos, touched[slot], op_i)
        diag.stale = diag.items - diag.matched - diag.mismatches
        return plan


MATCHERS = {"fuzzy": FuzzyMatcher, "fixed": FixedIndexMatcher}


def drive_iteration(
    trace: IterationTrace,
    policy: SwapPolicy | None,
    index: MatchIndex | None = None,
    matcher: str = "fuzzy",
) -> CommandPlan:
    """Per-op swap commands for ``trace`` under ``policy`` (empty if no policy)."""
    if policy is None or not policy.items:
        plan = CommandPlan(len(trace.ops))
        plan.diagnostics.items = 0
        return plan
    try:
        m = MATCHERS[matcher]()
    except KeyError:
        raise ValueError(f"unknown matcher {matcher!r}") from None
    return m.plan(trace, policy, index)
