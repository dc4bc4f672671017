"""Virtual address space bookkeeping on top of the kernel invocations.

A :class:`VSpace` owns a PML4 and builds intermediate tables on demand.  It
keeps a shadow of every table-to-table link it created, keyed by level and
the VA prefix the table covers, so no page-table memory has to be read back
to find where an entry lives.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

from sortedcontainers import SortedKeyList

from ..alloc import MemAttr, MemoryService
from ..capsys import CapType, Rights
from ..errors import OutOfVA, RightsExceeded, RuleViolation, SimError, UnknownRegion
from ..kernelapi import Kernel
from ..physmem import ENTRIES, LEVEL_SHIFTS, PAGE_1G, PAGE_2M, PAGE_4K, PTE_A, PTE_D, Fault

LEVEL_TYPES = (CapType.PML4, CapType.PDPT, CapType.PD, CapType.PT)
# level of the table that holds leaf entries of each page size
LEAF_LEVEL = {PAGE_4K: 3, PAGE_2M: 2, PAGE_1G: 1}
# fresh regions start on the boundary of the next larger page size
FRESH_ALIGN = {PAGE_4K: PAGE_2M, PAGE_2M: PAGE_1G, PAGE_1G: PAGE_1G}
VA_LIMIT = 1 << 47


def _pow2_chunks(n: int) -> list[int]:
    """Binary decomposition of ``n``, largest chunk first."""
    return [1 << b for b in range(n.bit_length() - 1, -1, -1) if n >> b & 1]


@dataclass
class MemObj:
    """An ordered list of frames, possibly of different sizes, backing regions."""

    frames: list[tuple[int, int]]

    @property
    def length(self) -> int:
        return sum(size for _, size in self.frames)

    @classmethod
    def allocate(cls, mem: MemoryService, size: int, page_size: int = PAGE_4K,
                 attrs: MemAttr = MemAttr()) -> MemObj:
        if size <= 0 or size % page_size:
            raise RuleViolation(f"object size {size:#x} is not a multiple of the page size")
        frames: list[tuple[int, int]] = []
        for chunk in _pow2_chunks(size):
            for h in mem.alloc_frames(attrs, chunk, page_size):
                frames.append((h, page_size))
        return cls(frames)

    def release(self, mem: MemoryService) -> None:
        """Return every allocator block backing this object.  Must be unmapped."""
        mine = {h for h, _ in self.frames}
        for blk in [b for b in mem.blocks.values() if b.handle in mine or (b.frames and b.frames[0] in mine)]:
            mem.release(blk.handle)
        self.frames = []

    def slice(self, offset: int, length: int) -> list[tuple[int, int]]:
        out = []
        pos = 0
        for h, size in self.frames:
            if pos + size <= offset:
                pos += size
                continue
            if pos >= offset + length:
                break
            if pos < offset or pos + size > offset + length:
                raise RuleViolation("region boundaries must fall on frame boundaries")
            out.append((h, size))
            pos += size
        if sum(s for _, s in out) != length:
            raise RuleViolation("memory object is too small for the region")
        return out


@dataclass(eq=False)
class VRegion:
    base: int
    length: int
    page_size: int
    flags: Rights
    obj: MemObj | None
    offset: int
    vspace: VSpace | None
    handles: list[int | None] = field(default_factory=list)
    copies: set[int] = field(default_factory=set)
    fault_handler: Callable[[Fault], None] | None = None
    pager: object | None = None

    @property
    def end(self) -> int:
        return self.base + self.length

    @property
    def npages(self) -> int:
        return self.length // self.page_size

    def page_va(self, index: int) -> int:
        return self.base + index * self.page_size

    def page_of(self, va: int) -> int:
        return (va - self.base) // self.page_size

    def contains(self, va: int) -> bool:
        return self.base <= va < self.end

    def __repr__(self) -> str:
        return f"<VRegion {self.base:#x}+{self.length:#x} pages={self.page_size:#x} {self.flags.name}>"


@dataclass
class StatusBits:
    """Accessed and dirty bits of a region, bit ``i`` for page ``i``."""

    accessed: int
    dirty: int
    npages: int

    def dirty_pages(self) -> list[int]:
        return [i for i in range(self.npages) if self.dirty >> i & 1]

    def accessed_pages(self) -> list[int]:
        return [i for i in range(self.npages) if self.accessed >> i & 1]


class VSpace:
    """One process's virtual address space."""

    def __init__(self, kernel: Kernel, mem: MemoryService, attrs: MemAttr = MemAttr(),
                 core: int = 0, batch: int = ENTRIES):
        if not 1 <= batch <= ENTRIES:
            raise ValueError("batch must be between 1 and 512")
        self.kernel = kernel
        self.mem = mem
        self.space = mem.space
        self.attrs = attrs
        self.core = core
        self.batch = batch
        self.pml4 = mem.alloc(attrs, PAGE_4K, cap_type=CapType.PML4)
        self.tables: dict[tuple[int, int], int] = {}
        self.table_maps = 0
        self.spare: dict[CapType, list[int]] = {t: [] for t in LEVEL_TYPES[1:]}
        self.free: list[tuple[int, int]] = [(PAGE_4K, VA_LIMIT)]
        self.reserved: list[tuple[int, int]] = []
        self.regions: SortedKeyList = SortedKeyList(key=lambda r: r.base)
        self._views: dict[int, int] = {}
        self._window: list[int] = []
        self._window_used = 0

    # -- activation and faults -------------------------------------------------

    def activate(self) -> None:
        self.kernel.install_vroot(self.space, self.pml4, self.core)

    @property
    def tu(self):
        return self.kernel.cores[self.core]

    def region_at(self, va: int) -> VRegion | None:
        i = self.regions.bisect_key_right(va) - 1
        if i >= 0 and self.regions[i].contains(va):
            return self.regions[i]
        return None

    def handle_fault(self, fault: Fault) -> None:
        """Process-level fault handler: dispatch to the region's handler, if any."""
        region = self.region_at(fault.va)
        if region is not None and region.fault_handler is not None:
            region.fault_handler(fault)

    # -- virtual address ranges ------------------------------------------------

    def _carve(self, lo: int, hi: int) -> bool:
        for i, (a, b) in enumerate(self.free):
            if a <= lo and hi <= b:
                repl = [(x, y) for x, y in ((a, lo), (hi, b)) if y > x]
                self.free[i:i + 1] = repl
                return True
        return False

    def _release(self, lo: int, hi: int) -> None:
        if any(a <= lo and hi <= b for a, b in self.reserved):
            return
        self.free.append((lo, hi))
        self.free.sort()
        merged: list[tuple[int, int]] = []
        for a, b in self.free:
            if merged and a <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(b, merged[-1][1]))
            else:
                merged.append((a, b))
        self.free = merged

    def _overlaps_region(self, lo: int, hi: int) -> bool:
        i = self.regions.bisect_key_left(hi) - 1
        return i >= 0 and self.regions[i].end > lo

    def _claim(self, va: int | None, length: int, align: int) -> int:
        if va is None:
            for a, b in self.free:
                lo = -(-a // align) * align
                if lo + length <= b:
                    self._carve(lo, lo + length)
                    return lo
            raise OutOfVA(f"no free range of {length:#x} bytes")
        if va % align or va < 0 or va + length > VA_LIMIT:
            raise OutOfVA(f"va {va:#x} is misaligned or out of range")
        if self._carve(va, va + length):
            return va
        inside = any(a <= va and va + length <= b for a, b in self.reserved)
        if inside and not self._overlaps_region(va, va + length):
            return va
        raise OutOfVA(f"[{va:#x}, {va + length:#x}) is not free")

    def reserve(self, length: int, align: int = PAGE_2M) -> int:
        """Set aside VA space that only explicit-address mappings may use."""
        base = self._claim(None, length, align)
        self.reserved.append((base, base + length))
        return base

    # -- page tables -----------------------------------------------------------

    def _key(self, level: int, va: int) -> tuple[int, int]:
        return level, va >> LEVEL_SHIFTS[level - 1]

    def table(self, level: int, va: int) -> int:
        """Handle of the level-``level`` table covering ``va``, created if needed."""
        if level == 0:
            return self.pml4
        key = self._key(level, va)
        h = self.tables.get(key)
        if h is not None:
            return h
        parent = self.table(level - 1, va)
        entry = (va >> LEVEL_SHIFTS[level - 1]) & 0x1FF
        kind = LEVEL_TYPES[level]
        spare = self.spare[kind]
        h = spare.pop() if spare else self.mem.alloc(self.attrs, PAGE_4K, cap_type=kind)
        self.kernel.invoke_map(self.space, parent, entry, [(h, Rights.RW)])
        self.table_maps += 1
        self.tables[key] = h
        return h

    def _unlink(self, level: int, prefix: int) -> None:
        """Detach a cached table (and its cached children) so a leaf can take its entry."""
        h = self.tables.get((level, prefix))
        if h is None:
            return
        if level < 3:
            for lvl, p in [k for k in self.tables if k[0] == level + 1 and k[1] >> 9 == prefix]:
                self._unlink(lvl, p)
        va = prefix << LEVEL_SHIFTS[level - 1]
        parent = self.table(level - 1, va)
        self.kernel.invoke_unmap(self.space, parent, prefix & 0x1FF, 1)
        del self.tables[(level, prefix)]
        self.spare[LEVEL_TYPES[level]].append(h)

    def _slot(self, page_size: int, va: int) -> tuple[int, int]:
        level = LEAF_LEVEL[page_size]
        shift = LEVEL_SHIFTS[level]
        if level < 3:
            self._unlink(level + 1, va >> shift)
        return self.table(level, va), (va >> shift) & 0x1FF

    def _runs(self, region: VRegion, pages: range | None = None) -> Iterator[tuple[int, int, int, int]]:
        """(table handle, first entry, count, first page) runs, at most ``batch`` long."""
        pages = range(region.npages) if pages is None else pages
        level = LEAF_LEVEL[region.page_size]
        shift = LEVEL_SHIFTS[level]
        i = pages.start
        while i < pages.stop:
            va = region.page_va(i)
            entry = (va >> shift) & 0x1FF
            n = min(ENTRIES - entry, pages.stop - i, self.batch)
            th = self.tables.get(self._key(level, va))
            if th is None:
                th, _ = self._slot(region.page_size, va)
            yield th, entry, n, i
            i += n

    # -- regions ---------------------------------------------------------------

    def map_region(self, obj: MemObj, va: int | None = None, page_size: int = PAGE_4K,
                   flags: Rights = Rights.RW, offset: int = 0, length: int | None = None) -> VRegion:
        """Map ``obj[offset:offset+length]`` with pages of ``page_size``."""
        if page_size not in LEAF_LEVEL:
            raise RuleViolation(f"unsupported page size {page_size:#x}")
        length = obj.length - offset if length is None else length
        if length <= 0 or length % page_size or offset % page_size:
            raise RuleViolation("region must be a positive multiple of its page size")
        pieces = obj.slice(offset, length)
        if any(size != page_size for _, size in pieces):
            raise RuleViolation(f"frames must all be {page_size:#x} bytes for this region")
        if flags & Rights.WRITE:
            for h, _ in pieces:
                if not self.space.resolve(h).rights & Rights.WRITE:
                    raise RightsExceeded("writable region over a read-only frame")
        align = page_size if va is not None else FRESH_ALIGN[page_size]
        base = self._claim(va, length, align)
        region = VRegion(base, length, page_size, flags, obj, offset, self)
        done: list[tuple[int, int, int]] = []
        try:
            self.mem.reserve_slots(len(pieces) + 8)
            for h, _ in pieces:
                if self.space.resolve(h).mapping is not None:
                    h = self.space.copy(h)
                    region.copies.add(h)
                region.handles.append(h)
            level = LEAF_LEVEL[page_size]
            if level < 3:
                for i in range(region.npages):
                    self._unlink(level + 1, region.page_va(i) >> LEVEL_SHIFTS[level])
            for th, entry, n, first in self._runs(region):
                self.kernel.invoke_map(self.space, th, entry,
                                       [(region.handles[first + k], flags) for k in range(n)])
                done.append((th, entry, n))
        except SimError:
            for th, entry, n in done:
                self.kernel.invoke_unmap(self.space, th, entry, n)
            for h in region.copies:
                self.space.delete(h)
            self._release(base, base + length)
            raise
        self.regions.add(region)
        return region

    def _live(self, region: VRegion) -> None:
        if region.vspace is not self or region not in self.regions:
            raise UnknownRegion(f"{region!r} is not mapped in this address space")

    def protect(self, region: VRegion, flags: Rights) -> int:
        """Change the protection of a whole region; returns the invocation count."""
        self._live(region)
        if flags & Rights.WRITE:
            for h in region.handles:
                if h is not None and not self.space.resolve(h).rights & Rights.WRITE:
                    raise RightsExceeded("frame capability lacks write rights")
        n = 0
        for th, entry, count, first in self._present_runs(region):
            self.kernel.invoke_modify_flags(self.space, th, entry, count, flags)
            n += 1
        region.flags = flags
        return n

    def protect_pages(self, region: VRegion, pages: range, flags: Rights) -> int:
        self._live(region)
        n = 0
        for th, entry, count, first in self._present_runs(region, pages):
            self.kernel.invoke_modify_flags(self.space, th, entry, count, flags)
            n += 1
        return n

    def _present_runs(self, region: VRegion, pages: range | None = None):
        """Like ``_runs`` but split around pages that are not currently mapped."""
        for th, entry, count, first in self._runs(region, pages):
            k = 0
            while k < count:
                if region.handles[first + k] is None:
                    k += 1
                    continue
                j = k
                while j < count and region.handles[first + j] is not None:
                    j += 1
                yield th, entry + k, j - k, first + k
                k = j

    def unmap(self, region: VRegion) -> int:
        """Remove every mapping of ``region``; page tables are kept for reuse."""
        self._live(region)
        n = 0
        for th, entry, count, first in self._runs(region):
            self.kernel.invoke_unmap(self.space, th, entry, count)
            n += 1
        for h in region.copies:
            self.space.delete(h)
        region.copies.clear()
        region.handles = [None] * region.npages
        self.regions.remove(region)
        region.vspace = None
        self._release(region.base, region.end)
        return n

    # -- per-page operations used by pagers ----------------------------------

    def unmap_pages(self, region: VRegion, pages: range | None = None) -> int:
        n = 0
        for th, entry, count, first in self._present_runs(region, pages):
            self.kernel.invoke_unmap(self.space, th, entry, count)
            for k in range(count):
                region.handles[first + k] = None
            n += 1
        return n

    def map_page(self, region: VRegion, index: int, handle: int) -> None:
        if region.handles[index] is not None:
            raise RuleViolation(f"page {index} is already mapped")
        if self.space.resolve(handle).mapping is not None:
            handle = self.space.copy(handle)
            region.copies.add(handle)
        th, entry = self._slot(region.page_size, region.page_va(index))
        self.kernel.invoke_map(self.space, th, entry, [(handle, region.flags)])
        region.handles[index] = handle

    def entry_of(self, region: VRegion, index: int) -> tuple[int, int]:
        return self._slot(region.page_size, region.page_va(index))

    # -- status bits -----------------------------------------------------------

    def _view(self, table: int) -> int:
        """VA of a read-only mapping of ``table``, created on first use."""
        va = self._views.get(table)
        if va is not None:
            return va
        slot = self._window_used
        if slot // ENTRIES >= len(self._window):
            self._window.append(self.reserve(PAGE_2M, PAGE_2M))
        va = self._window[slot // ENTRIES] + (slot % ENTRIES) * PAGE_4K
        self.mem.reserve_slots(2)
        view = self.space.copy(table, rights=Rights.READ)
        pt, entry = self._slot(PAGE_4K, va)
        self.kernel.invoke_map(self.space, pt, entry, [(view, Rights.READ)])
        self._window_used += 1
        self._views[table] = va
        return va

    def read_status_bits(self, region: VRegion, pages: range | None = None) -> StatusBits:
        """Gather accessed/dirty bits with plain loads through read-only table views.

        Only the first call for a given table costs kernel invocations.
        """
        self._live(region)
        views = [(self._view(th), entry, count, first) for th, entry, count, first in self._runs(region, pages)]
        tu = self.tu
        accessed = dirty = 0
        for va, entry, count, first in views:
            raw = tu.read_bytes(va + 8 * entry, 8 * count)
            if isinstance(raw, Fault):
                raise UnknownRegion(f"status view unreadable: {raw}")
            for k, pte in enumerate(struct.unpack(f"<{count}Q", raw)):
                if region.handles[first + k] is None:
                    continue
                if pte & PTE_A:
                    accessed |= 1 << (first + k)
                if pte & PTE_D:
                    dirty |= 1 << (first + k)
        return StatusBits(accessed, dirty, region.npages)

    def clear_status(self, region: VRegion, pages: range | None = None) -> int:
        """Reset accessed/dirty bits; one invocation per page table touched."""
        self._live(region)
        n = 0
        for th, entry, count, first in self._present_runs(region, pages):
            self.kernel.invoke_clear_dirty_bits(self.space, th, entry, count)
            n += 1
        return n

    # -- inspection ------------------------------------------------------------

    def shadow_links(self) -> set[tuple[int, int]]:
        """(parent table base, entry) of every table-to-table link in the shadow."""
        out = set()
        for (level, prefix), h in self.tables.items():
            parent = self.pml4 if level == 1 else self.tables[(level - 1, prefix >> 9)]
            out.add((self.space.resolve(parent).base, prefix & 0x1FF))
        return out
