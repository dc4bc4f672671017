"""sbrk/malloc veneer: a first-fit allocator over a growing 4 KiB-page region."""

from __future__ import annotations

import bisect

from ..capsys import Rights
from ..errors import OutOfMemory, OutOfVA
from ..physmem import PAGE_4K
from .vspace import MemObj, VSpace

ALIGN = 16


class Heap:
    def __init__(self, vspace: VSpace, initial_pages: int = 1, max_bytes: int = 1 << 30):
        self.vspace = vspace
        self.base = vspace.reserve(max_bytes)
        self.limit = self.base + max_bytes
        self.brk = self.base
        self.regions = []
        # sorted disjoint free blocks as parallel lists of start and size
        self._starts: list[int] = []
        self._sizes: list[int] = []
        self.used: dict[int, int] = {}
        if initial_pages:
            self._add_free(self.morecore(initial_pages * PAGE_4K), initial_pages * PAGE_4K)

    def morecore(self, nbytes: int) -> int:
        """Grow the heap by whole pages; returns the previous break."""
        if nbytes <= 0:
            return self.brk
        size = -(-nbytes // PAGE_4K) * PAGE_4K
        if self.brk + size > self.limit:
            raise OutOfVA("heap reservation exhausted")
        vs = self.vspace
        region = vs.map_region(MemObj.allocate(vs.mem, size, PAGE_4K, vs.attrs), va=self.brk,
                               flags=Rights.RW)
        self.regions.append(region)
        old = self.brk
        self.brk += size
        return old

    def _add_free(self, start: int, size: int) -> None:
        i = bisect.bisect_left(self._starts, start)
        self._starts.insert(i, start)
        self._sizes.insert(i, size)
        # coalesce with the following and preceding blocks
        if i + 1 < len(self._starts) and start + size == self._starts[i + 1]:
            self._sizes[i] += self._sizes.pop(i + 1)
            self._starts.pop(i + 1)
        if i > 0 and self._starts[i - 1] + self._sizes[i - 1] == start:
            self._sizes[i - 1] += self._sizes.pop(i)
            self._starts.pop(i)

    def malloc(self, nbytes: int) -> int:
        if nbytes <= 0:
            raise ValueError("malloc size must be positive")
        need = -(-nbytes // ALIGN) * ALIGN
        while True:
            for i, size in enumerate(self._sizes):
                if size >= need:
                    va = self._starts[i]
                    if size == need:
                        self._starts.pop(i)
                        self._sizes.pop(i)
                    else:
                        self._starts[i] += need
                        self._sizes[i] -= need
                    self.used[va] = need
                    return va
            try:
                grow = max(need, PAGE_4K)
                start = self.morecore(grow)
            except OutOfVA as exc:
                raise OutOfMemory(str(exc)) from None
            self._add_free(start, self.brk - start)

    def free(self, va: int) -> None:
        size = self.used.pop(va, None)
        if size is None:
            raise ValueError(f"{va:#x} was not returned by malloc")
        self._add_free(va, size)

    def free_bytes(self) -> int:
        return sum(self._sizes)
