"""Demand pager driven by mapped dirty bits.

A pager owns a fixed pool of frames for one region.  Faults on the region
are resolved by mapping a pool frame, evicting the oldest resident page
when the pool is empty.  A victim is written to the backing store only if
its dirty bit, read through the read-only table view, is set.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

from ..capsys import Rights
from ..errors import NoFrames, UnknownRegion
from ..physmem import Fault
from .store import BackingStore
from .vspace import VRegion, VSpace

# victim policy: takes the residency queue (oldest first), returns the page to evict
Policy = Callable[[deque], int]


def fifo(queue: deque) -> int:
    return queue.popleft()


@dataclass
class PagerStats:
    faults: int = 0
    evictions: int = 0
    dirty_evictions: int = 0
    store_writes: int = 0
    store_loads: int = 0
    zero_fills: int = 0


class Pager:
    def __init__(self, vspace: VSpace, region: VRegion, resident_frames: int,
                 store: BackingStore | None = None, policy: Policy = fifo):
        if resident_frames <= 0:
            raise NoFrames("a pager needs at least one resident frame")
        if region.vspace is not vspace:
            raise UnknownRegion(f"{region!r} is not mapped in this address space")
        if not region.flags & Rights.WRITE:
            raise ValueError("paged regions must be writable")
        self.vspace = vspace
        self.region = region
        self.store = store if store is not None else BackingStore(region.page_size)
        if self.store.page_size != region.page_size:
            raise ValueError("store page size must match the region's page size")
        self.policy = policy
        self.stats = PagerStats()
        self.queue: deque[int] = deque()
        self.touched: set[int] = set()
        self.free: list[int] = []
        self.owned: list[int] = []
        self.frame_of: dict[int, int] = {}
        self.max_resident = 0
        self._attach(resident_frames)

    def _attach(self, n: int) -> None:
        vs, region = self.vspace, self.region
        live = [i for i, h in enumerate(region.handles) if h is not None]
        if live:
            bits = vs.read_status_bits(region)
            for i in live:
                if (bits.dirty | bits.accessed) >> i & 1:
                    self._writeback(i)
                    self.touched.add(i)
            vs.unmap_pages(region)
        self.add_frames(n)
        region.fault_handler = self.fault
        region.pager = self

    @property
    def resident(self) -> int:
        return len(self.queue)

    @property
    def capacity(self) -> int:
        return len(self.queue) + len(self.free)

    def add_frames(self, n: int) -> None:
        vs = self.vspace
        for _ in range(n):
            h = vs.mem.alloc(vs.attrs, self.region.page_size)
            self.free.append(h)
            self.owned.append(h)

    def remove_frames(self, n: int) -> None:
        if n >= self.capacity:
            raise NoFrames("cannot remove every resident frame")
        for _ in range(n):
            if not self.free:
                self._evict()
            h = self.free.pop()
            self.owned.remove(h)
            self.vspace.mem.release(h)

    def _writeback(self, index: int) -> None:
        data = self.vspace.tu.read_bytes(self.region.page_va(index), self.region.page_size)
        if isinstance(data, Fault):
            raise UnknownRegion(f"cannot read page {index} for writeback: {data}")
        self.store.write(index, data)
        self.stats.store_writes += 1

    def _evict(self) -> None:
        vs, region = self.vspace, self.region
        victim = self.policy(self.queue)
        bits = vs.read_status_bits(region, range(victim, victim + 1))
        if bits.dirty >> victim & 1:
            self._writeback(victim)
            self.stats.dirty_evictions += 1
        handle = region.handles[victim]
        vs.unmap_pages(region, range(victim, victim + 1))
        if handle in region.copies:
            region.copies.discard(handle)
            vs.space.delete(handle)
        self.free.append(self.frame_of.pop(victim))
        self.stats.evictions += 1

    def fault(self, fault: Fault) -> None:
        vs, region = self.vspace, self.region
        index = region.page_of(fault.va)
        if region.handles[index] is not None:
            return
        self.stats.faults += 1
        if not self.free:
            self._evict()
        frame = self.free.pop()
        vs.map_page(region, index, frame)
        self.frame_of[index] = frame
        va = region.page_va(index)
        if index in self.store:
            vs.tu.write_bytes(va, self.store.read(index))
            self.stats.store_loads += 1
        else:
            vs.tu.write_bytes(va, bytes(region.page_size))
            self.stats.zero_fills += 1
        vs.clear_status(region, range(index, index + 1))
        self.queue.append(index)
        self.touched.add(index)
        self.max_resident = max(self.max_resident, len(self.queue))

    def present_pages(self) -> int:
        return sum(1 for h in self.region.handles if h is not None)

    def detach(self) -> None:
        """Write back dirty pages, unmap them and return the pool frames."""
        vs, region = self.vspace, self.region
        while self.queue:
            self._evict()
        region.fault_handler = None
        region.pager = None
        for h in self.owned:
            vs.mem.release(h)
        self.owned.clear()
        self.free.clear()
