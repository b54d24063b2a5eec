"""Stream-aware caching allocator over one flat device arena.

Each stream owns a free list of address extents.  Allocation is best-fit
over extents that need no synchronization, then growth of the arena while
under budget, then best-fit over extents still guarded by a pending copy
event (the caller must make its first user wait on that event).  Freed
extents are merged with free neighbours of the same stream and the same
guard state.

``stitch=True`` lets one logical block span several non-adjacent free
extents, which stands in for virtual-memory stitching defragmentation.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum

NO_EVENT = None


class BlockState(str, Enum):
    FREE = "Free"
    LIVE = "Live"
    SWAPPING_OUT = "SwappingOut"
    AWAITING_RELEASE = "AwaitingRelease"


@dataclass(eq=False)
class MemoryBlock:
    block_id: int
    size: int
    stream: int
    extents: list[tuple[int, int]]  # (addr, size)
    state: BlockState = BlockState.LIVE
    event: float | None = None  # device time of the guarding copy, when pending
    wait: float = 0.0  # first user must not start before this

    @property
    def lo(self) -> int:
        return min(a for a, _ in self.extents)


@dataclass
class _Extent:
    addr: int
    size: int
    event: float | None = None

    @property
    def end(self) -> int:
        return self.addr + self.size


@dataclass
class CachingAllocator:
    budget: int
    reserved: int = 0  # arena high-water mark
    allocated: int = 0  # bytes in blocks handed out and not yet freed
    free_lists: dict[int, list[_Extent]] = field(default_factory=dict)
    _next_id: int = 0

    def __post_init__(self):
        if self.budget <= 0:
            raise ValueError("budget must be > 0")

    # -- helpers ----------------------------------------------------------
    def _fl(self, stream: int) -> list[_Extent]:
        return self.free_lists.setdefault(stream, [])

    def _make(self, size: int, stream: int, extents: list[tuple[int, int]], wait: float) -> MemoryBlock:
        self._next_id += 1
        self.allocated += size
        return MemoryBlock(self._next_id, size, stream, extents, BlockState.LIVE, None, wait)

    def _take(self, fl: list[_Extent], k: int, size: int) -> tuple[int, float | None]:
        ext = fl[k]
        addr, ev = ext.addr, ext.event
        if ext.size == size:
            del fl[k]
        else:
            ext.addr += size
            ext.size -= size
        return addr, ev

    def _best_fit(self, fl: list[_Extent], size: int, pending: bool) -> int | None:
        best = None
        for k, ext in enumerate(fl):
            if (ext.event is not None) != pending or ext.size < size:
                continue
            if best is None or ext.size < fl[best].size:
                best = k
        return best

    def free_bytes(self, stream: int | None = None) -> int:
        lists = self.free_lists.values() if stream is None else [self._fl(stream)]
        return sum(e.size for fl in lists for e in fl)

    # -- public -----------------------------------------------------------
    def try_alloc(self, size: int, stream: int, stitch: bool = False) -> MemoryBlock | None:
        if size <= 0:
            raise ValueError("allocation size must be > 0")
        fl = self._fl(stream)
        k = self._best_fit(fl, size, pending=False)
        if k is not None:
            addr, _ = self._take(fl, k, size)
            return self._make(size, stream, [(addr, size)], 0.0)
        if self.reserved + size <= self.budget:
            addr = self.reserved
            self.reserved += size
            return self._make(size, stream, [(addr, size)], 0.0)
        k = self._best_fit(fl, size, pending=True)
        if k is not None:
            addr, ev = self._take(fl, k, size)
            return self._make(size, stream, [(addr, size)], ev or 0.0)
        if stitch and self.free_bytes(stream) + (self.budget - self.reserved) >= size:
            need, parts, wait = size, [], 0.0
            for ext in sorted(fl, key=lambda e: (-e.size, e.addr)):
                if need == 0:
                    break
                take = min(need, ext.size)
                parts.append((ext.addr, take))
                wait = max(wait, ext.event or 0.0)
                need -= take
            for addr, take in parts:
                k = next(i for i, e in enumerate(fl) if e.addr == addr)
                self._take(fl, k, take)
            if need:
                parts.append((self.reserved, need))
                self.reserved += need
            return self._make(size, stream, sorted(parts), wait)
        return None

    def free(self, block: MemoryBlock, event: float | None = None) -> None:
        """Return ``block`` to its stream's free list.

        ``event`` is the device time of a copy that may still read the
        block; the next user has to wait for it.
        """
        if block.state is BlockState.FREE:
            raise ValueError(f"double free of block {block.block_id}")
        block.state = BlockState.FREE
        self.allocated -= block.size
        fl = self._fl(block.stream)
        for addr, size in block.extents:
            self._insert(fl, _Extent(addr, size, event))

    def _insert(self, fl: list[_Extent], ext: _Extent) -> None:
        addrs = [e.addr for e in fl]
        k = bisect.bisect_left(addrs, ext.addr)
        fl.insert(k, ext)
        # merge with right, then left neighbour when guard state matches
        if k + 1 < len(fl) and fl[k].end == fl[k + 1].addr and _compatible(fl[k], fl[k + 1]):
            fl[k].size += fl[k + 1].size
            fl[k].event = _max_event(fl[k].event, fl[k + 1].event)
            del fl[k + 1]
        if k > 0 and fl[k - 1].end == fl[k].addr and _compatible(fl[k - 1], fl[k]):
            fl[k - 1].size += fl[k].size
            fl[k - 1].event = _max_event(fl[k - 1].event, fl[k].event)
            del fl[k]

    def largest_free(self, stream: int) -> int:
        return max((e.size for e in self._fl(stream)), default=0)


def _compatible(a: _Extent, b: _Extent) -> bool:
    return (a.event is None) == (b.event is None)


def _max_event(a: float | None, b: float | None) -> float | None:
    if a is None:
        return b
    if b is None:
        return a
    return max(a, b)
