"""Physical memory allocators.

Each NUMA node gets a buddy pool over its span.  The pool only does
bookkeeping; authority for an allocated block is created by retyping the
node's Untyped capability at the block's offset, so the capability system
still rejects any overlap the bookkeeping might get wrong.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

from sortedcontainers import SortedList

from .capsys import CapSpace, CapType, is_pow2
from .errors import HasDescendants, InvalidAttr, InvalidSize, OutOfMemory, StillMapped
from .physmem import PAGE_4K


class MemKind(enum.Enum):
    DRAM = "dram"
    PERSISTENT = "persistent"
    DEVICE = "device"


@dataclass(frozen=True)
class MemAttr:
    numa_node: int = 0
    kind: MemKind = MemKind.DRAM
    color_set: frozenset[int] | None = None

    def __post_init__(self):
        if self.color_set is not None and not isinstance(self.color_set, frozenset):
            object.__setattr__(self, "color_set", frozenset(self.color_set))


@dataclass(frozen=True)
class ColorGeometry:
    cache_size: int
    ways: int
    line: int = 64
    page_size: int = PAGE_4K

    def __post_init__(self):
        if self.num_colors < 1:
            raise InvalidAttr("cache geometry yields no colors")

    @classmethod
    def from_cache(cls, l3, page_size: int = PAGE_4K) -> ColorGeometry:
        return cls(l3.size, l3.ways, l3.line, page_size)

    @property
    def num_colors(self) -> int:
        return self.cache_size // (self.ways * self.page_size)

    def color(self, pa: int) -> int:
        return (pa // self.page_size) % self.num_colors

    def colors_of(self, base: int, size: int) -> set[int]:
        n = self.num_colors
        pages = max(1, size // self.page_size)
        if pages >= n:
            return set(range(n))
        first = self.color(base)
        return {(first + i) % n for i in range(pages)}

    def start_colors(self, color_set: frozenset[int], size: int) -> frozenset[int]:
        """Colors a block of ``size`` may start at so every sub-page is in ``color_set``."""
        n = self.num_colors
        pages = max(1, size // self.page_size)
        if pages >= n:
            return frozenset(range(n)) if len(color_set) == n else frozenset()
        return frozenset(c for c in range(n) if all((c + i) % n in color_set for i in range(pages)))


def _order(size: int) -> int:
    return size.bit_length() - 1


class BuddyPool:
    """Binary buddy allocator over ``[base, base + size)``; blocks are at least 4 KiB."""

    def __init__(self, base: int, size: int, min_size: int = PAGE_4K):
        if not is_pow2(size) or base % size:
            raise InvalidSize("a buddy pool must be a naturally aligned power of two")
        self.base = base
        self.size = size
        self.min_order = _order(min_size)
        self.max_order = _order(size)
        self.free: dict[int, SortedList] = {o: SortedList() for o in range(self.min_order, self.max_order + 1)}
        self.free[self.max_order].add(base)
        self.allocated: dict[int, int] = {}

    def free_bytes(self) -> int:
        return sum(len(lst) << o for o, lst in self.free.items())

    def allocated_bytes(self) -> int:
        return sum(1 << o for o in self.allocated.values())

    def _fit(self, block: int, border: int, order: int, align: int,
             accept: Callable[[int], bool] | None) -> int | None:
        end = block + (1 << border)
        start = -(-block // align) * align
        for s in range(start, end - (1 << order) + 1, align):
            if accept is None or accept(s):
                return s
        return None

    def alloc(self, size: int, align: int | None = None,
              accept: Callable[[int], bool] | None = None) -> int:
        """Allocate the lowest suitable block from the smallest free order."""
        if not is_pow2(size) or size < 1 << self.min_order:
            raise InvalidSize(f"block size {size:#x}")
        order = _order(size)
        if order > self.max_order:
            raise OutOfMemory(f"{size:#x} exceeds pool")
        align = max(size, align or size)
        for o in range(order, self.max_order + 1):
            for block in self.free[o]:
                sub = self._fit(block, o, order, align, accept)
                if sub is not None:
                    self._carve(block, o, sub, order)
                    return sub
        raise OutOfMemory(f"no free {size:#x} block")

    def _carve(self, block: int, o: int, sub: int, order: int) -> None:
        self.free[o].remove(block)
        while o > order:
            o -= 1
            half = 1 << o
            if sub < block + half:
                self.free[o].add(block + half)
            else:
                self.free[o].add(block)
                block += half
        self.allocated[sub] = order

    def release(self, base: int) -> None:
        order = self.allocated.pop(base)
        while order < self.max_order:
            buddy = self.base + ((base - self.base) ^ (1 << order))
            lst = self.free[order]
            if buddy not in lst:
                break
            lst.remove(buddy)
            base = min(base, buddy)
            order += 1
        self.free[order].add(base)


@dataclass
class Block:
    node: int
    base: int
    size: int
    ram: int
    handle: int
    frames: list[int] = field(default_factory=list)


class MemoryService:
    """Attribute-aware allocator service holding per-node Untyped capabilities."""

    SLOT_MARGIN = 8

    def __init__(self, kernel, nodes: list[tuple[int, int]] | None = None,
                 distance: list[list[int]] | None = None, colors: ColorGeometry | None = None,
                 kinds: list[MemKind] | None = None, space: CapSpace | None = None):
        self.kernel = kernel
        self.space = space or kernel.space
        nodes = nodes or [(0, kernel.mem.size)]
        self.nodes = list(nodes)
        self.distance = distance or [[10 if i == j else 20 for j in range(len(nodes))] for i in range(len(nodes))]
        self.colors = colors
        self.kinds = kinds or [MemKind.DRAM] * len(nodes)
        self.pools = [BuddyPool(b, s) for b, s in nodes]
        self.node_caps = []
        for base, size in nodes:
            if base == 0 and size == kernel.mem.size:
                self.node_caps.append(kernel.untyped)
            else:
                self.node_caps.append(self.space.retype(kernel.untyped, CapType.UNTYPED, size, 1, offset=base)[0])
        self.blocks: dict[int, Block] = {}

    @classmethod
    def from_machine(cls, kernel, machine) -> MemoryService:
        return cls(kernel, list(machine.nodes), [list(r) for r in machine.distance],
                   ColorGeometry.from_cache(machine.l3))

    # -- validation ----------------------------------------------------------

    def _accept(self, attrs: MemAttr, size: int) -> Callable[[int], bool] | None:
        if attrs.color_set is None:
            return None
        if self.colors is None:
            raise InvalidAttr("no cache geometry configured for colored allocation")
        n = self.colors.num_colors
        if any(not 0 <= c < n for c in attrs.color_set):
            raise InvalidAttr(f"color index outside 0..{n - 1}")
        starts = self.colors.start_colors(attrs.color_set, size)
        page = self.colors.page_size
        return lambda s: (s // page) % n in starts

    def _check(self, attrs: MemAttr) -> None:
        if not 0 <= attrs.numa_node < len(self.nodes):
            raise InvalidAttr(f"no NUMA node {attrs.numa_node}")
        if self.kinds[attrs.numa_node] is not attrs.kind:
            raise InvalidAttr(f"node {attrs.numa_node} has no {attrs.kind.value} memory")

    def reserve_slots(self, n: int) -> None:
        """Grow the capability space with CNodes until ``n`` slots are free."""
        space = self.space
        while True:
            deficit = n + self.SLOT_MARGIN - space.free_slots()
            if deficit <= 0:
                return
            node = max(range(len(self.nodes)), key=lambda i: self.pools[i].free_bytes())
            # each new CNode adds 255 slots and costs two (its RAM parent and itself)
            for _ in range(-(-deficit // 253)):
                self._alloc(node, MemAttr(node, self.kinds[node]), PAGE_4K, None, CapType.CNODE)

    # -- allocation ------------------------------------------------------------

    def _alloc(self, node: int, attrs: MemAttr, size: int, align: int | None,
               cap_type: CapType) -> int:
        if cap_type is not CapType.FRAME and cap_type is not CapType.RAM and size != PAGE_4K:
            raise InvalidSize(f"{cap_type.name} objects are exactly 4 KiB")
        accept = self._accept(attrs, size)
        pool = self.pools[node]
        base = pool.alloc(size, align, accept)
        try:
            space = self.space
            ram = space.retype(self.node_caps[node], CapType.RAM, size, 1,
                               offset=base - self.nodes[node][0])[0]
            handle = ram if cap_type is CapType.RAM else space.retype(ram, cap_type, size, 1)[0]
        except Exception:
            pool.release(base)
            raise
        self.blocks[handle] = Block(node, base, size, ram, handle)
        return handle

    def alloc(self, attrs: MemAttr, size: int, align: int | None = None,
              cap_type: CapType = CapType.FRAME) -> int:
        """Strict allocation on ``attrs.numa_node``; never falls back."""
        self._check(attrs)
        if not is_pow2(size) or size < PAGE_4K:
            raise InvalidSize(f"allocation size {size:#x}")
        self.reserve_slots(2)
        return self._alloc(attrs.numa_node, attrs, size, align, cap_type)

    def alloc_best_effort(self, preferred_node: int, size: int, align: int | None = None,
                          cap_type: CapType = CapType.FRAME, kind: MemKind = MemKind.DRAM) -> int:
        """Try ``preferred_node`` first, then the others by increasing distance."""
        if not 0 <= preferred_node < len(self.nodes):
            raise InvalidAttr(f"no NUMA node {preferred_node}")
        row = self.distance[preferred_node]
        order = sorted(range(len(self.nodes)), key=lambda n: (row[n], n))
        for node in order:
            if self.kinds[node] is not kind:
                continue
            try:
                return self.alloc(MemAttr(node, kind), size, align, cap_type)
            except OutOfMemory:
                continue
        raise OutOfMemory(f"no node can supply {size:#x} bytes")

    def alloc_frames(self, attrs: MemAttr, size: int, frame_size: int = PAGE_4K,
                     align: int | None = None) -> list[int]:
        """Allocate ``size`` bytes and split them into ``frame_size`` Frames."""
        if not is_pow2(frame_size) or frame_size > size:
            raise InvalidSize(f"frame size {frame_size:#x}")
        count = size // frame_size
        self.reserve_slots(count + 2)
        ram = self.alloc(attrs, size, align, CapType.RAM)
        frames = self.space.retype(ram, CapType.FRAME, frame_size, count)
        self.blocks[ram].frames = frames
        return frames

    def block_of(self, handle: int) -> Block:
        return self.blocks[handle]

    def release(self, handle: int) -> None:
        """Return a block to its pool.  It must be unmapped and underived."""
        blk = self.blocks.get(handle)
        if blk is None:
            raise InvalidAttr(f"handle {handle:#x} was not allocated here")
        space = self.space
        cap = space.resolve(handle)
        if any(c.mapping is not None for c in cap.obj.copies):
            raise StillMapped("block is still mapped")
        frames = [space.resolve(f) for f in blk.frames]
        if any(c.mapping is not None for f in frames for c in f.obj.copies):
            raise StillMapped("a frame of the block is still mapped")
        extra = len(cap.obj.children) - len(frames)
        if extra > 0 or any(f.obj.children for f in frames):
            raise HasDescendants("block has derived capabilities")
        space.revoke(blk.ram)
        space.delete(blk.ram)
        del self.blocks[handle]
        self.pools[blk.node].release(blk.base)

    def free_bytes(self, node: int | None = None) -> int:
        pools = self.pools if node is None else [self.pools[node]]
        return sum(p.free_bytes() for p in pools)
