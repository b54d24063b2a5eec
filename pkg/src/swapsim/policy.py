"""Swap-policy generation.

Pipeline for one profiled iteration:

1. ``build_mrl``: ops whose reconstructed usage exceeds the budget, with the
   bytes that must go.
2. ``build_cl``: tensors alive across those ops between their last forward
   and first backward use, ranked by ``n_mre/max + C * size/max``.
3. ``partition_layers``: contiguous op groups with an estimated duration of
   ``T_iter / N_iter * group_size``; that duration is the transfer time the
   swap stream can hide under the group.
4. ``simulate_swap_in``: per candidate, a forward-searched group hides the
   swap-out and a backward-searched group hides the swap-in, both spending
   the groups' remaining time.  Bytes count as freed only between the two.
"""

from __future__ import annotations

import bisect
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from . import kernels
from .features import FeatureTables, TensorFeature
from .profiler import DetailedRecord, MemoryTimeline, reconstruct_memory
from .trace import Phase, TraceFormatError, iter_json_lines

log = logging.getLogger(__name__)


class PolicyError(RuntimeError):
    """Memory cannot be brought under budget (no candidate left)."""

    def __init__(self, message: str, op_index: int | None = None, residual: int = 0):
        super().__init__(message)
        self.op_index = op_index
        self.residual = residual


def swap_time(size: float, bandwidth: float) -> float:
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    return size / bandwidth


# ---------------------------------------------------------------------------
# Memory reduction list
# ---------------------------------------------------------------------------


class MemoryReductionList:
    """op_index -> bytes still to be freed, for ops over budget."""

    def __init__(self, entries: dict[int, int] | Iterable[tuple[int, int]] = ()):
        items = entries.items() if isinstance(entries, dict) else entries
        self._val = {int(op): int(b) for op, b in items if b > 0}
        self._ops = sorted(self._val)

    def __len__(self) -> int:
        return len(self._ops)

    def __bool__(self) -> bool:
        return bool(self._ops)

    def __contains__(self, op: int) -> bool:
        return op in self._val

    def __getitem__(self, op: int) -> int:
        return self._val[op]

    def items(self) -> list[tuple[int, int]]:
        return [(op, self._val[op]) for op in self._ops]

    def to_dict(self) -> dict[int, int]:
        return dict(self.items())

    def copy(self) -> "MemoryReductionList":
        return MemoryReductionList(self.items())

    def _span(self, lo: int, hi: int) -> tuple[int, int]:
        return bisect.bisect_left(self._ops, lo), bisect.bisect_left(self._ops, hi)

    def count_in(self, lo: int, hi: int) -> int:
        a, b = self._span(lo, hi)
        return b - a

    def first_in(self, lo: int, hi: int) -> int | None:
        a, b = self._span(lo, hi)
        return self._ops[a] if a < b else None

    def credit(self, lo: int, hi: int, size: int) -> None:
        """Subtract ``size`` from every entry in [lo, hi); drop exhausted ones."""
        a, b = self._span(lo, hi)
        keep = []
        for op in self._ops[a:b]:
            left = self._val[op] - size
            if left > 0:
                self._val[op] = left
                keep.append(op)
            else:
                del self._val[op]
        self._ops[a:b] = keep

    def worst(self) -> tuple[int, int] | None:
        if not self._ops:
            return None
        op = max(self._ops, key=lambda o: (self._val[o], -o))
        return op, self._val[op]


def build_mrl(timeline: MemoryTimeline | np.ndarray, budget: int) -> MemoryReductionList:
    if budget <= 0:
        raise ValueError("budget must be > 0")
    usage = timeline.actual_usage if isinstance(timeline, MemoryTimeline) else np.asarray(timeline)
    over = np.flatnonzero(usage > budget)
    return MemoryReductionList((int(i), int(usage[i] - budget)) for i in over)


# ---------------------------------------------------------------------------
# Candidates
# ---------------------------------------------------------------------------


@dataclass
class Candidate:
    tensor_id: int
    size: int
    dtype: int
    last_fwd_use: int
    first_bwd_use: int
    key: tuple[int, int, int, int]  # feature after the last forward use
    ordinal: int  # earlier touches with the same key in the profiled iteration
    fixed_key: tuple[int, int]  # (op_index, slot) for the fixed-index baseline
    op_token: int
    n_mre: int = 0
    score: float = 0.0

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("candidate size must be > 0")
        if not self.last_fwd_use < self.first_bwd_use:
            raise ValueError("last_fwd_use must precede first_bwd_use")


def swappable_tensors(detailed: DetailedRecord) -> list[Candidate]:
    """Every tensor touched in FWD and read again in BWD, unscored."""
    trace = detailed.trace
    feats = detailed.features
    keys = feats.keys()
    ords = feats.ordinals()
    lfu: dict[int, int] = {}  # tensor -> touch index of its last FWD touch
    fbu: dict[int, int] = {}
    phase = [op.phase for op in trace.ops]
    for k, (op, tid) in enumerate(zip(feats.op.tolist(), feats.tensor.tolist())):
        ph = phase[op]
        if ph is Phase.FWD:
            lfu[tid] = k
        elif ph is Phase.BWD and tid in lfu and tid not in fbu:
            fbu[tid] = k
    out = []
    for tid, k in lfu.items():
        if tid not in fbu:
            continue
        op = int(feats.op[k])
        decl = trace.tensors[tid]
        out.append(
            Candidate(
                tensor_id=tid,
                size=decl.size,
                dtype=int(decl.dtype),
                last_fwd_use=op,
                first_bwd_use=int(feats.op[fbu[tid]]),
                key=keys[k],
                ordinal=ords[k],
                fixed_key=(op, int(feats.slot[k])),
                op_token=trace.ops[op].op_token,
            )
        )
    out.sort(key=lambda c: c.tensor_id)
    return out


def rank_candidates(cands: list[Candidate], C: float = 1.0) -> list[Candidate]:
    """Max-normalize coverage and size, score, and sort best first."""
    if not cands:
        return []
    max_n = max(c.n_mre for c in cands)
    max_s = max(c.size for c in cands)
    for c in cands:
        c.score = c.n_mre / max_n + C * c.size / max_s
    return sorted(cands, key=lambda c: (-c.score, -c.size, c.last_fwd_use, c.tensor_id))


def build_cl(
    detailed: DetailedRecord,
    mrl: MemoryReductionList,
    C: float = 1.0,
    exclude: Iterable[int] = (),
    pool: list[Candidate] | None = None,
) -> list[Candidate]:
    """Candidate list sorted by descending score.

    ``pool`` lets callers reuse :func:`swappable_tensors` across loop rounds.
    """
    skip = set(exclude)
    out = []
    for c in pool if pool is not None else swappable_tensors(detailed):
        if c.tensor_id in skip:
            continue
        n = mrl.count_in(c.last_fwd_use, c.first_bwd_use)
        if n == 0:
            continue
        out.append(replace(c, n_mre=n, score=0.0))
    return rank_candidates(out, C)


# ---------------------------------------------------------------------------
# Logical layers
# ---------------------------------------------------------------------------


@dataclass
class LogicalLayer:
    index: int
    start_op_id: int
    end_op: int  # exclusive
    layer_type: Phase
    estimated_duration: float
    remaining_time: float
    candidates: list[int] = field(default_factory=list)

    @property
    def n_ops(self) -> int:
        return self.end_op - self.start_op_id


def split_even(n: int, groups: int) -> list[int]:
    """Sizes of ``groups`` contiguous groups over ``n`` items, larger ones first."""
    base, rem = divmod(n, groups)
    return [base + (1 if g < rem else 0) for g in range(groups)]


def partition_layers(
    detailed: DetailedRecord, groups_fwd: int, groups_bwd: int, overlap_factor: float = 1.0
) -> list[LogicalLayer]:
    if not 0 < overlap_factor <= 1:
        raise ValueError("overlap_factor must be in (0, 1]")
    ranges = detailed.trace.phase_ranges()
    n_iter = len(detailed.trace.ops)
    per_op = detailed.iteration_duration / n_iter if n_iter else 0.0
    layers: list[LogicalLayer] = []
    for phase, groups in ((Phase.FWD, groups_fwd), (Phase.BWD, groups_bwd), (Phase.OPT, 1)):
        if phase not in ranges:
            continue
        lo, hi = ranges[phase]
        if not 1 <= groups <= hi - lo:
            raise ValueError(f"{phase.name} group count {groups} must be in [1, {hi - lo}]")
        pos = lo
        for size in split_even(hi - lo, groups):
            est = per_op * size
            layers.append(LogicalLayer(len(layers), pos, pos + size, phase, est, est * overlap_factor))
            pos += size
    return layers


def layer_of(layers: list[LogicalLayer], op: int) -> int:
    starts = [l.start_op_id for l in layers]
    return bisect.bisect_right(starts, op) - 1


def grouping_error(costs, n_groups: int) -> np.ndarray:
    """Relative error of the even-split duration estimate, per group."""
    est, true = kernels.group_costs(costs, n_groups)
    return np.abs(est - true) / true


# ---------------------------------------------------------------------------
# Swap timing
# ---------------------------------------------------------------------------


@dataclass
class PolicyItem:
    tensor_id: int
    size: int
    dtype: int
    key: tuple[int, int, int, int]
    ordinal: int
    fixed_key: tuple[int, int]
    op_token: int
    swap_out_after: int
    first_bwd_use: int
    swap_in_layer: int
    swap_in_op: int
    free_at: int = -1
    fallback: bool = False

    @property
    def feature(self) -> TensorFeature:
        return TensorFeature.from_key(self.key)

    def to_json(self) -> dict:
        d = asdict(self)
        d["key"] = [str(k) for k in self.key]  # 64-bit stack does not fit every JSON reader
        d["fixed_key"] = list(self.fixed_key)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "PolicyItem":
        obj = dict(obj)
        obj["key"] = tuple(int(k) for k in obj["key"])
        obj["fixed_key"] = tuple(int(k) for k in obj["fixed_key"])
        return cls(**obj)


def swap_out_layer(layers: list[LogicalLayer], last_fwd_use: int, t_swap: float, before: int | None = None) -> int | None:
    """Forward search for the group that hides a swap-out; ``None`` if none below ``before`` fits.

    The copy cannot start before ``last_fwd_use`` has run, so in that op's own
    group only the share of the budget belonging to later ops is usable.
    """
    first = layer_of(layers, last_fwd_use)
    for li in range(first, len(layers) if before is None else before):
        layer = layers[li]
        room = layer.remaining_time
        if li == first:
            room *= (layer.end_op - 1 - last_fwd_use) / (layer.end_op - layer.start_op_id)
        if room > t_swap:
            return li
    return None


def _assign(cand: Candidate, out_li: int, in_li: int, t_swap: float, mrl: MemoryReductionList,
            layers: list[LogicalLayer], fallback: bool) -> PolicyItem:
    out, inn = layers[out_li], layers[in_li]
    for layer in (out, inn):
        layer.remaining_time = max(0.0, layer.remaining_time - t_swap)
        layer.candidates.append(cand.tensor_id)
    # the block is gone only once the swap-out has finished, i.e. after ``out``
    mrl.credit(out.end_op, inn.start_op_id, cand.size)
    return PolicyItem(
        tensor_id=cand.tensor_id,
        size=cand.size,
        dtype=cand.dtype,
        key=cand.key,
        ordinal=cand.ordinal,
        fixed_key=cand.fixed_key,
        op_token=cand.op_token,
        swap_out_after=cand.last_fwd_use,
        first_bwd_use=cand.first_bwd_use,
        swap_in_layer=inn.index,
        swap_in_op=inn.start_op_id,
        free_at=out.end_op - 1,
        fallback=fallback,
    )


def simulate_swap_in(
    cl: list[Candidate], mrl: MemoryReductionList, layers: list[LogicalLayer], bandwidth: float
) -> list[PolicyItem]:
    """Place swap-outs and swap-ins for candidates in score order.

    Mutates ``mrl`` and ``layers``.  Each candidate first gets the earliest
    group after its last forward use that can hide the swap-out; the swap-in
    then goes to the latest group before its first backward use that starts
    after the first over-budget op it can still help with.
    """
    items: list[PolicyItem] = []
    for cand in cl:
        if not mrl:
            break
        t = swap_time(cand.size, bandwidth)
        hi = layer_of(layers, cand.first_bwd_use) - 1
        out_li = swap_out_layer(layers, cand.last_fwd_use, t, hi)
        if out_li is None:
            continue
        peak = mrl.first_in(layers[out_li].end_op, cand.first_bwd_use)
        if peak is None:
            continue  # earlier picks already cleared everything it could help with
        li = hi
        while li > out_li and layers[li].start_op_id > peak:
            if layers[li].remaining_time > t:
                items.append(_assign(cand, out_li, li, t, mrl, layers, False))
                break
            li -= 1
    if not items and mrl:
        # nothing fits anywhere: take the best candidate regardless of budget
        for cand in cl:
            out_li = layer_of(layers, cand.last_fwd_use)
            hi = layer_of(layers, cand.first_bwd_use) - 1
            peak = mrl.first_in(layers[out_li].end_op, cand.first_bwd_use)
            if hi > out_li and peak is not None and layers[hi].start_op_id > peak:
                items.append(_assign(cand, out_li, hi, swap_time(cand.size, bandwidth), mrl, layers, True))
                break
    return items


def simulate_swap_out(items: list[PolicyItem]) -> tuple[list[PolicyItem], bool]:
    """Items in swap-out order, and whether any transfer exceeded its group's budget."""
    ordered = sorted(items, key=lambda it: (it.swap_out_after, it.tensor_id))
    return ordered, any(it.fallback for it in ordered)


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------


@dataclass
class PolicyConfig:
    C: float = 1.0
    groups_fwd: int | None = None  # None: one group per model layer
    groups_bwd: int | None = None
    overlap_factor: float = 1.0
    refine: bool = True  # retry with doubled group counts when coarse layers leave MREs uncovered

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown policy fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SwapPolicy:
    items: list[PolicyItem]
    bandwidth: float
    tables: FeatureTables
    layer_starts: list[int] = field(default_factory=list)
    transfer_saturated: bool = False
    n_ops: int = 0
    source_iter: int = -1

    def __len__(self) -> int:
        return len(self.items)

    def header(self) -> dict:
        return {
            "format": "swapsim-policy",
            "bandwidth": self.bandwidth,
            "layer_starts": self.layer_starts,
            "transfer_saturated": self.transfer_saturated,
            "n_ops": self.n_ops,
            "source_iter": self.source_iter,
            "n_items": len(self.items),
            "tables": self.tables.to_dict(),
        }

    def to_jsonl(self) -> bytes:
        dump = lambda o: json.dumps(o, separators=(",", ":"), sort_keys=True)
        lines = [dump(self.header())] + [dump(it.to_json()) for it in self.items]
        return ("\n".join(lines) + "\n").encode("utf-8")

    @classmethod
    def from_jsonl(cls, data: bytes) -> "SwapPolicy":
        rows = iter_json_lines(data)
        try:
            off, head = next(rows)
        except StopIteration:
            raise TraceFormatError("empty policy file", 0) from None
        if head.get("format") != "swapsim-policy":
            raise TraceFormatError("missing policy header", off)
        items = []
        for off, obj in rows:
            try:
                items.append(PolicyItem.from_json(obj))
            except (KeyError, TypeError, ValueError) as e:
                raise TraceFormatError(f"bad policy item: {e!r}", off) from None
        if len(items) != head.get("n_items"):
            raise TraceFormatError("policy item count mismatch (truncated?)", len(data))
        return cls(
            items,
            float(head["bandwidth"]),
            FeatureTables.from_dict(head["tables"]),
            list(head["layer_starts"]),
            bool(head["transfer_saturated"]),
            int(head["n_ops"]),
            int(head["source_iter"]),
        )


def default_groups(detailed: DetailedRecord, model_layers: int | None, phase: Phase) -> int:
    ranges = detailed.trace.phase_ranges()
    if phase not in ranges:
        return 1
    n = ranges[phase][1] - ranges[phase][0]
    return max(1, min(n, model_layers or n))


def generate_policy(
    detailed: DetailedRecord,
    timeline: MemoryTimeline | None,
    budget: int,
    bandwidth: float,
    config: PolicyConfig | None = None,
    model_layers: int | None = None,
) -> SwapPolicy:
    """Build a swap policy for one profiled iteration.

    Raises :class:`PolicyError` when memory cannot be brought under budget.
    """
    config = config or PolicyConfig()
    if timeline is None:
        timeline = reconstruct_memory(detailed)
    ranges = detailed.trace.phase_ranges()
    caps = {ph: ranges[ph][1] - ranges[ph][0] for ph in (Phase.FWD, Phase.BWD) if ph in ranges}
    gf = config.groups_fwd or default_groups(detailed, model_layers, Phase.FWD)
    gb = config.groups_bwd or default_groups(detailed, model_layers, Phase.BWD)
    gf, gb = min(gf, caps.get(Phase.FWD, gf)), min(gb, caps.get(Phase.BWD, gb))
    while True:
        try:
            return _plan(detailed, timeline, budget, bandwidth, config, gf, gb)
        except PolicyError:
            nf, nb = min(2 * gf, caps.get(Phase.FWD, gf)), min(2 * gb, caps.get(Phase.BWD, gb))
            if not config.refine or (nf, nb) == (gf, gb):
                raise
            log.debug("no feasible plan with %d/%d groups, retrying with %d/%d", gf, gb, nf, nb)
            gf, gb = nf, nb


def _plan(detailed, timeline, budget, bandwidth, config, gf, gb) -> SwapPolicy:
    layers = partition_layers(detailed, gf, gb, config.overlap_factor)
    mrl = build_mrl(timeline, budget)
    pool = swappable_tensors(detailed)
    items: list[PolicyItem] = []
    swapped: set[int] = set()
    while mrl:
        cl = build_cl(detailed, mrl, config.C, swapped, pool)
        placed = simulate_swap_in(cl, mrl, layers, bandwidth) if cl else []
        if not placed:
            op, left = mrl.worst()
            raise PolicyError(f"cannot avoid OOM: op {op} still needs {left} bytes freed", op, left)
        items.extend(placed)
        swapped.update(it.tensor_id for it in placed)
    items, saturated = simulate_swap_out(items)
    return SwapPolicy(
        items,
        bandwidth,
        detailed.tables,
        [l.start_op_id for l in layers],
        saturated,
        len(detailed.trace.ops),
        detailed.trace.iter_index,
    )


def apply_reductions(usage: np.ndarray, items: list[PolicyItem]) -> np.ndarray:
    """Usage with each item's bytes removed between its release and its swap-in."""
    out = np.asarray(usage, dtype=np.int64).copy()
    for it in items:
        out[it.free_at + 1 : it.swap_in_op] -= it.size
    return out


__all__ = [
    "Candidate",
    "LogicalLayer",
    "MemoryReductionList",
    "PolicyConfig",
    "PolicyError",
    "PolicyItem",
    "SwapPolicy",
    "apply_reductions",
    "build_cl",
    "build_mrl",
    "generate_policy",
    "grouping_error",
    "layer_of",
    "partition_layers",
    "rank_candidates",
    "simulate_swap_in",
    "simulate_swap_out",
    "swap_out_layer",
    "swap_time",
    "swappable_tensors",
]
