"""Discrete-event model of host dispatch, a compute stream and a swap stream.

The host walks the op list, paying ``host_dispatch_cost`` per op, and may run
at most ``launch_queue_depth`` ops ahead of the device.  Device work is
timestamped analytically: a compute op starts at
``max(host enqueue time, previous compute end, awaited events)`` and copies
are serialized on the swap stream at ``size / bandwidth``.  Memory comes
from :class:`~swapsim.allocator.CachingAllocator`; a tensor's block is
released at the host point where its last reader is dispatched.

Blocks read by a swap-out copy are protected in one of three ways:

* ``naive``: the block waits in a list; every later allocation makes the
  host query each outstanding event (``event_query_cost`` apiece) and
  releases blocks whose copy finished by the current host time.
* ``custom``: the block is released right after the host dispatches op
  ``free_at``; the first user of the memory waits on the copy event.
* ``none``: released immediately with no ordering (for detector checks only).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from . import kernels
from .allocator import BlockState, CachingAllocator, MemoryBlock
from .executor import CommandPlan
from .profiler import SWAP_DROP, SWAP_IN, SWAP_OUT, SwapEvent
from .trace import IterationTrace

COMPUTE = 0
SWAP_D2H = 1
SWAP_H2D = 2


class RecordStreamMode(str, Enum):
    NAIVE = "naive"
    CUSTOM = "custom"
    NONE = "none"


class OOMError(RuntimeError):
    def __init__(self, op_index: int, size: int, budget: int):
        super().__init__(f"out of memory at op {op_index}: request {size} bytes, budget {budget}")
        self.op_index = op_index
        self.size = size


@dataclass
class SimConfig:
    memory_budget: int
    bandwidth: float
    host_dispatch_cost: float = 1.0
    event_query_cost: float = 0.2
    swap_dispatch_cost: float = 0.5
    launch_queue_depth: int = 64
    defragmentation: bool = True
    defrag_cost: float = 0.0
    stitch_on_alloc: bool = True
    record_stream_mode: RecordStreamMode = RecordStreamMode.CUSTOM
    bidirectional: bool = False

    def __post_init__(self):
        self.record_stream_mode = RecordStreamMode(self.record_stream_mode)
        if self.memory_budget <= 0 or self.bandwidth <= 0:
            raise ValueError("memory_budget and bandwidth must be > 0")
        if min(self.host_dispatch_cost, self.event_query_cost, self.swap_dispatch_cost, self.defrag_cost) < 0:
            raise ValueError("costs must be >= 0")
        if self.launch_queue_depth < 1:
            raise ValueError("launch_queue_depth must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["record_stream_mode"] = self.record_stream_mode.value
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sim fields: {sorted(unknown)}")
        return cls(**data)


# kind -> tie-break priority within one timestamp
EVENT_KINDS = (
    "HostDispatch",
    "Alloc",
    "Free",
    "EventRecord",
    "EventWait",
    "CopyStart",
    "ComputeStart",
    "CopyEnd",
    "ComputeEnd",
)
_PRIORITY = {k: i for i, k in enumerate(EVENT_KINDS)}


@dataclass(frozen=True)
class SimEvent:
    t: float
    kind: str
    seq: int
    op: int
    stream: int = COMPUTE
    info: tuple = ()

    def sort_key(self):
        return (self.t, _PRIORITY[self.kind], self.seq)

    def to_json(self) -> dict:
        return {"t": self.t, "kind": self.kind, "seq": self.seq, "op": self.op, "stream": self.stream,
                "info": list(self.info)}


@dataclass
class SimMetrics:
    peak_memory: int = 0
    step_time: float = 0.0
    device_idle_time: float = 0.0
    host_time: float = 0.0
    compute_time: float = 0.0
    swap_busy_time: float = 0.0
    oom_count: int = 0
    passive_swap_count: int = 0
    hazard_count: int = 0
    swap_out_count: int = 0
    swap_in_count: int = 0
    demand_swap_in_count: int = 0
    event_queries: int = 0
    reuse_interval_max: int = 0
    reuse_interval_mean: float = 0.0
    reuse_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    metrics: SimMetrics
    live_memory: np.ndarray
    swap_events: list[SwapEvent]
    reuse_intervals: list[int]
    accesses: list[tuple]  # (stream, start, end, lo, hi, write)
    log: list[SimEvent] = field(default_factory=list)

    def log_jsonl(self) -> bytes:
        ev = sorted(self.log, key=SimEvent.sort_key)
        return "".join(json.dumps(e.to_json(), separators=(",", ":"), sort_keys=True) + "\n" for e in ev).encode()


@dataclass(eq=False)
class _Tensor:
    tid: int
    size: int
    last_use: int
    alloc_seq: int
    block: MemoryBlock | None = None
    on_device: bool = False
    ready: float = 0.0  # device time its data is valid on device
    host_ready: float = 0.0  # device time its host copy is complete
    pending: MemoryBlock | None = None  # old block awaiting release after swap-out
    dead: bool = False


def hazard_check(accesses: list[tuple]) -> int:
    """Cross-stream access pairs that overlap in time and address with a write."""
    if not accesses:
        return 0
    a = np.asarray(accesses, dtype=np.float64)
    return kernels.hazard_count(a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4], a[:, 5])


class _Sim:
    def __init__(self, trace: IterationTrace, plan: CommandPlan, cfg: SimConfig, static_bytes: int, log: bool):
        self.trace = trace
        self.plan = plan
        self.cfg = cfg
        self.n = len(trace.ops)
        self.static_bytes = static_bytes
        self.alloc_ = CachingAllocator(cfg.memory_budget)
        self.m = SimMetrics()
        self.host = 0.0
        self.compute_tail = 0.0
        self.tail = {SWAP_D2H: 0.0, SWAP_H2D: 0.0}
        self.op_end: list[float] = []
        self.tensors: dict[int, _Tensor] = {}
        self.life = trace.lifetimes()
        self.dying: dict[int, list[int]] = {}
        for tid, (_d, u) in self.life.items():
            self.dying.setdefault(u, []).append(tid)
        self.custom_due: dict[int, list[tuple[MemoryBlock, _Tensor, int]]] = {}
        self.naive_wait: list[tuple[MemoryBlock, _Tensor, int]] = []
        self.reuse: list[int] = []
        self.swaps: list[SwapEvent] = []
        self.accesses: list[tuple] = []
        self.log_on = log
        self.log: list[SimEvent] = []
        self.seq = 0
        self.cur = 0
        self.protected: set[int] = set()
        self.live = np.zeros(self.n, dtype=np.int64)
        self.alloc_seq = 0

    # -- bookkeeping ------------------------------------------------------
    def _ev(self, t, kind, stream=COMPUTE, *info):
        if self.log_on:
            self.log.append(SimEvent(float(t), kind, self.seq, self.cur, stream, tuple(info)))
        self.seq += 1

    def _touch(self, stream, start, end, block: MemoryBlock, write: bool):
        for addr, size in block.extents:
            self.accesses.append((stream, start, end, addr, addr + size, 1 if write else 0))

    def _swap_stream(self, direction: str) -> int:
        if direction == SWAP_OUT or not self.cfg.bidirectional:
            return SWAP_D2H
        return SWAP_H2D

    # -- memory -----------------------------------------------------------
    def _release(self, block: MemoryBlock, t: _Tensor | None, mark: int, event: float | None, at_op: int):
        self.alloc_.free(block, event)
        self._ev(self.host, "Free", block.stream, block.block_id)
        if event is not None:
            self._ev(self.host, "EventRecord", SWAP_D2H, block.block_id, event)
        self.reuse.append(at_op - mark)
        if t is not None:
            t.pending = None
            if not t.dead:
                self.swaps.append(SwapEvent(at_op, t.tid, t.size, SWAP_OUT, "policy"))

    def _poll_naive(self):
        if not self.naive_wait:
            return
        self.host += self.cfg.event_query_cost * len(self.naive_wait)
        self.m.event_queries += len(self.naive_wait)
        still = []
        for blk, t, mark in self.naive_wait:
            if blk.event <= self.host:
                self._release(blk, t, mark, None, self.cur)
            else:
                still.append((blk, t, mark))
        self.naive_wait = still

    def _flush_pending(self, at_op: int):
        """Release every block still guarded by a swap-out copy, with an event wait."""
        for op in sorted(self.custom_due):
            for blk, t, mark in self.custom_due[op]:
                self._release(blk, t, mark, blk.event, at_op)
        self.custom_due.clear()
        for blk, t, mark in self.naive_wait:
            self._release(blk, t, mark, blk.event, at_op)
        self.naive_wait = []

    def _force_release(self, t: _Tensor):
        blk = t.pending
        for op, lst in list(self.custom_due.items()):
            for entry in lst:
                if entry[0] is blk:
                    lst.remove(entry)
                    self._release(blk, t, entry[2], blk.event, self.cur)
                    return
        for entry in self.naive_wait:
            if entry[0] is blk:
                self.naive_wait.remove(entry)
                self._release(blk, t, entry[2], blk.event, self.cur)
                return

    def alloc(self, size: int, stream: int = COMPUTE) -> MemoryBlock:
        if self.cfg.record_stream_mode is RecordStreamMode.NAIVE:
            self._poll_naive()
        blk = self.alloc_.try_alloc(size, stream, stitch=self.cfg.defragmentation and self.cfg.stitch_on_alloc)
        if blk is None:
            blk = self.handle_oom(size, stream)
        self._ev(self.host, "Alloc", stream, blk.block_id, size)
        if self.alloc_.allocated > self.m.peak_memory:
            self.m.peak_memory = self.alloc_.allocated
        return blk

    def handle_oom(self, size: int, stream: int) -> MemoryBlock:
        self.m.oom_count += 1
        self._flush_pending(self.cur)
        stitch = self.cfg.defragmentation
        if stitch:
            self.host += self.cfg.defrag_cost
        blk = self.alloc_.try_alloc(size, stream, stitch=stitch)
        while blk is None:
            victim = self._pick_victim(size)
            if victim is None:
                raise OOMError(self.cur, size, self.cfg.memory_budget)
            self._passive_swap(victim)
            blk = self.alloc_.try_alloc(size, stream, stitch=stitch)
        return blk

    def _pick_victim(self, size: int) -> _Tensor | None:
        best, best_key = None, None
        for t in self.tensors.values():
            if not t.on_device or t.tid in self.protected or t.tid < 0 or t.dead:
                continue
            key = (abs(t.size - size), -t.size, t.alloc_seq)
            if best_key is None or key < best_key:
                best, best_key = t, key
        return best

    def _passive_swap(self, t: _Tensor):
        end = self._copy_out(t)
        blk = t.block
        t.block, t.on_device = None, False
        self.m.passive_swap_count += 1
        self.alloc_.free(blk, end)
        self._ev(self.host, "Free", blk.stream, blk.block_id)
        self._ev(self.host, "EventRecord", SWAP_D2H, blk.block_id, end)
        self.swaps.append(SwapEvent(self.cur, t.tid, t.size, SWAP_OUT, "passive"))

    # -- swaps ------------------------------------------------------------
    def _copy_out(self, t: _Tensor) -> float:
        s = self._swap_stream(SWAP_OUT)
        start = max(self.host, self.compute_tail, self.tail[s], t.ready)
        end = start + t.size / self.cfg.bandwidth
        self.tail[s] = end
        self.m.swap_busy_time += end - start
        self.host += self.cfg.swap_dispatch_cost
        self._touch(s, start, end, t.block, False)
        self._ev(start, "CopyStart", s, t.tid, "out")
        self._ev(end, "CopyEnd", s, t.tid, "out")
        t.host_ready = end
        self.m.swap_out_count += 1
        return end

    def swap_out(self, tid: int, free_at: int):
        t = self.tensors.get(tid)
        if t is None or not t.on_device or t.tid < 0:
            return
        if not self.cur <= free_at < self.n:
            raise ValueError(f"free_at {free_at} outside iteration")
        end = self._copy_out(t)
        blk = t.block
        t.block, t.on_device = None, False
        mode = self.cfg.record_stream_mode
        if mode is RecordStreamMode.NONE:
            self.alloc_.free(blk, None)
            self._ev(self.host, "Free", blk.stream, blk.block_id)
            self.reuse.append(0)
            self.swaps.append(SwapEvent(self.cur + 1, t.tid, t.size, SWAP_OUT, "policy"))
            return
        blk.event = end
        t.pending = blk
        if mode is RecordStreamMode.CUSTOM:
            blk.state = BlockState.SWAPPING_OUT
            self.custom_due.setdefault(free_at, []).append((blk, t, self.cur))
        else:
            blk.state = BlockState.AWAITING_RELEASE
            self.naive_wait.append((blk, t, self.cur))

    def swap_in(self, tid: int, demand: bool = False):
        t = self.tensors.get(tid)
        if t is None or t.on_device or t.dead:
            return
        if t.pending is not None:
            self._force_release(t)
        blk = self.alloc(t.size)
        s = self._swap_stream(SWAP_IN)
        self._ev(self.host, "EventWait", s, blk.block_id)
        start = max(self.host, self.compute_tail, self.tail[s], t.host_ready, blk.wait)
        end = start + t.size / self.cfg.bandwidth
        self.tail[s] = end
        self.m.swap_busy_time += end - start
        self.host += self.cfg.swap_dispatch_cost
        t.block, t.on_device, t.ready = blk, True, end
        self._touch(s, start, end, blk, True)
        self._ev(start, "CopyStart", s, t.tid, "in")
        self._ev(end, "CopyEnd", s, t.tid, "in")
        self.swaps.append(SwapEvent(self.cur, t.tid, t.size, SWAP_IN, "demand" if demand else "policy"))
        self.m.swap_in_count += 1
        if demand:
            self.m.demand_swap_in_count += 1

    # -- main loop --------------------------------------------------------
    def run(self) -> RunResult:
        cfg, plan, trace = self.cfg, self.plan, self.trace
        static = None
        if self.static_bytes > 0:
            static = _Tensor(-1, self.static_bytes, self.n, -1)
            static.block = self.alloc(self.static_bytes)
            static.on_device = True
        Q = cfg.launch_queue_depth
        for i, op in enumerate(trace.ops):
            self.cur = i
            if i >= Q and self.op_end[i - Q] > self.host:
                self.host = self.op_end[i - Q]
            self.protected = set(op.inputs) | set(op.outputs)
            for cmd in plan.before.get(i, ()):
                self.swap_in(cmd.tensor_id)
            for tid in op.inputs:
                if not self.tensors[tid].on_device:
                    self.swap_in(tid, demand=True)
            waits = [self.tensors[tid].ready for tid in op.inputs]
            for tid in op.outputs:
                size = trace.tensors[tid].size
                t = _Tensor(tid, size, self.life[tid][1], self.alloc_seq)
                self.alloc_seq += 1
                t.block = self.alloc(size)
                t.on_device = True
                if t.block.wait > 0:
                    self._ev(self.host, "EventWait", COMPUTE, t.block.block_id, t.block.wait)
                waits.append(t.block.wait)
                self.tensors[tid] = t
            self.live[i] = self.alloc_.allocated
            self._ev(self.host, "HostDispatch", COMPUTE, op.op_token)
            start = max([self.host, self.compute_tail, *waits])
            end = start + op.compute_cost
            self.compute_tail = end
            self.op_end.append(end)
            self._ev(start, "ComputeStart", COMPUTE, op.op_token)
            self._ev(end, "ComputeEnd", COMPUTE, op.op_token)
            for tid in op.inputs:
                self._touch(COMPUTE, start, end, self.tensors[tid].block, False)
            for tid in op.outputs:
                self.tensors[tid].ready = end
                self._touch(COMPUTE, start, end, self.tensors[tid].block, True)
            self.host += cfg.host_dispatch_cost
            self.m.compute_time += op.compute_cost

            for cmd in plan.after.get(i, ()):
                self.swap_out(cmd.tensor_id, cmd.free_at)
            for tid in self.dying.get(i, ()):
                t = self.tensors[tid]
                t.dead = True
                if t.on_device:
                    self.alloc_.free(t.block)
                    self._ev(self.host, "Free", COMPUTE, t.block.block_id)
                    t.block, t.on_device = None, False
                elif t.pending is None:
                    self.swaps.append(SwapEvent(i + 1, tid, t.size, SWAP_DROP, "policy"))
                del self.tensors[tid]
            for blk, t, mark in self.custom_due.pop(i, ()):
                self._release(blk, t, mark, blk.event, i + 1)
            self.protected = set()

        self.cur = self.n
        self._flush_pending(self.n)
        if static is not None:
            self.alloc_.free(static.block)
        m = self.m
        m.host_time = self.host
        m.step_time = max(self.host, self.compute_tail, *self.tail.values())
        m.device_idle_time = max(0.0, m.step_time - m.compute_time)
        m.hazard_count = hazard_check(self.accesses)
        if self.reuse:
            m.reuse_interval_max = int(max(self.reuse))
            m.reuse_interval_mean = float(np.mean(self.reuse))
            m.reuse_count = len(self.reuse)
        return RunResult(m, self.live, self.swaps, self.reuse, self.accesses, self.log)


def run_iteration(
    trace: IterationTrace,
    plan: CommandPlan | None,
    config: SimConfig,
    static_bytes: int = 0,
    log: bool = False,
) -> RunResult:
    """Simulate one iteration; raises :class:`OOMError` when memory cannot be found."""
    if plan is None:
        plan = CommandPlan(len(trace.ops))
    return _Sim(trace, plan, config, static_bytes, log).run()


def unbounded(config: SimConfig, trace: IterationTrace, static_bytes: int = 0) -> SimConfig:
    """``config`` with a budget no allocation pattern of ``trace`` can exceed."""
    total = static_bytes + sum(t.size for t in trace.tensors.values())
    return replace(config, memory_budget=max(config.memory_budget, total + 1))


def baseline_step_time(trace: IterationTrace, config: SimConfig, static_bytes: int = 0) -> float:
    """Step time with no swaps and no memory limit."""
    return run_iteration(trace, None, unbounded(config, trace, static_bytes), static_bytes).metrics.step_time
