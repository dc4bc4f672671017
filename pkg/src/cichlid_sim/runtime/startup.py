"""Parent-side construction of a new process's initial address space."""

from __future__ import annotations

from dataclasses import dataclass

from ..alloc import MemAttr, MemoryService
from ..capsys import Rights
from ..kernelapi import Kernel, Process
from ..physmem import PAGE_4K
from .heap import Heap
from .vspace import MemObj, VRegion, VSpace

CODE_BASE = 0x40_0000


@dataclass
class ProcessImage:
    process: Process
    vspace: VSpace
    heap: Heap
    code: VRegion
    data: VRegion
    bss: VRegion


def spawn(kernel: Kernel, mem: MemoryService, core: int = 0, code_pages: int = 4,
          data_pages: int = 4, bss_pages: int = 4, heap_pages: int = 4,
          attrs: MemAttr = MemAttr()) -> ProcessImage:
    """Build code/data/bss placeholders and a heap seed, then start the process."""
    vs = VSpace(kernel, mem, attrs, core)
    va = CODE_BASE
    code = vs.map_region(MemObj.allocate(mem, code_pages * PAGE_4K, attrs=attrs), va=va, flags=Rights.READ)
    va = code.end
    data = vs.map_region(MemObj.allocate(mem, data_pages * PAGE_4K, attrs=attrs), va=va)
    va = data.end
    bss = vs.map_region(MemObj.allocate(mem, bss_pages * PAGE_4K, attrs=attrs), va=va)
    vs.activate()
    proc = kernel.spawn(mem.space, core, handler=vs.handle_fault)
    # frames are not zeroed by default, so clear bss explicitly
    proc.write_bytes(bss.base, bytes(bss.length))
    heap = Heap(vs, heap_pages)
    return ProcessImage(proc, vs, heap, code, data, bss)
