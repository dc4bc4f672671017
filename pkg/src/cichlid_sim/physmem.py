"""Emulated physical memory, the x86-64 page-table walker and per-page-size TLBs.

Page tables are ordinary 4 KiB pages inside :class:`PhysMem`; nothing about
translations is kept anywhere else except in the TLB arrays of a
:class:`TranslationUnit` (and the kernel's mapping records).
"""

from __future__ import annotations

import bisect
import enum
import mmap
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

from .errors import InvalidRoot

PAGE_4K = 1 << 12
PAGE_2M = 1 << 21
PAGE_1G = 1 << 30
PAGE_SIZES = (PAGE_4K, PAGE_2M, PAGE_1G)
ENTRIES = 512

PTE_P = 1 << 0
PTE_RW = 1 << 1
PTE_US = 1 << 2
PTE_A = 1 << 5
PTE_D = 1 << 6
PTE_PS = 1 << 7
PTE_ADDR = 0x000F_FFFF_FFFF_F000

# shift of the VA bits indexing each level, PML4 first
LEVEL_SHIFTS = (39, 30, 21, 12)

_U64 = struct.Struct("<Q")
_TABLE = struct.Struct("<512Q")
_MAP_NORESERVE = getattr(mmap, "MAP_NORESERVE", 0x4000)


class Access(enum.Enum):
    READ = "read"
    WRITE = "write"


class FaultCause(enum.Enum):
    NOT_PRESENT = "not-present"
    WRITE_TO_READONLY = "write-to-readonly"
    NO_TRANSLATION_ROOT = "no-translation-root"


@dataclass(frozen=True)
class Fault:
    va: int
    access: Access
    cause: FaultCause
    walk_reads: int = field(default=0, compare=False)

    def __str__(self) -> str:
        return f"{self.cause.value} fault on {self.access.value} at {self.va:#x}"


@dataclass(frozen=True, slots=True)
class Translation:
    va: int
    pa: int
    page_size: int
    leaf_loc: int
    leaf_pte: int
    writable: bool
    reads: int


def is_canonical(va: int) -> bool:
    top = va >> 47
    return top == 0 or top == 0x1FFFF


def canonical(va: int) -> int:
    """Sign-extend a 48-bit virtual address."""
    va &= (1 << 48) - 1
    if va & (1 << 47):
        va |= 0xFFFF_0000_0000_0000
    return va


class PhysMem:
    """Flat byte-addressable physical memory.

    Backed by an anonymous private mapping, so untouched pages cost nothing
    and read as zero.
    """

    def __init__(self, size: int):
        self.size = size
        self._buf = mmap.mmap(-1, size, flags=mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS | _MAP_NORESERVE)

    def _check(self, pa: int, n: int) -> None:
        if pa < 0 or pa + n > self.size:
            raise IndexError(f"physical access [{pa:#x}, {pa + n:#x}) outside memory")

    def read(self, pa: int, n: int) -> bytes:
        self._check(pa, n)
        return self._buf[pa:pa + n]

    def write(self, pa: int, data: bytes) -> None:
        self._check(pa, len(data))
        self._buf[pa:pa + len(data)] = data

    def read_u64(self, pa: int) -> int:
        return _U64.unpack_from(self._buf, pa)[0]

    def write_u64(self, pa: int, value: int) -> None:
        _U64.pack_into(self._buf, pa, value)

    def read_table(self, pa: int) -> tuple[int, ...]:
        return _TABLE.unpack_from(self._buf, pa)

    def zero(self, pa: int, n: int) -> None:
        self._check(pa, n)
        if n >= 1 << 16 and pa % mmap.PAGESIZE == 0 and n % mmap.PAGESIZE == 0:
            self._buf.madvise(mmap.MADV_DONTNEED, pa, n)
        else:
            self._buf[pa:pa + n] = bytes(n)

    def close(self) -> None:
        self._buf.close()


def walk(mem: PhysMem, root: int | None, va: int,
         access: Access = Access.READ) -> Translation | Fault:
    """Translate ``va`` through the 4-level table at ``root``.

    Pure function of memory contents.  Costs 4, 3 or 2 PTE reads for 4 KiB,
    2 MiB and 1 GiB leaves.  Write permission is the AND of every level's
    writable bit.
    """
    if root is None or not is_canonical(va):
        return Fault(va, access, FaultCause.NO_TRANSLATION_ROOT)
    table = root
    writable = True
    reads = 0
    for shift in LEVEL_SHIFTS:
        loc = table + ((va >> shift) & 0x1FF) * 8
        pte = _U64.unpack_from(mem._buf, loc)[0]
        reads += 1
        if not pte & PTE_P:
            return Fault(va, access, FaultCause.NOT_PRESENT, reads)
        writable = writable and bool(pte & PTE_RW)
        if shift == 12 or (pte & PTE_PS and shift != 39):
            size = 1 << shift
            if access is Access.WRITE and not writable:
                return Fault(va, access, FaultCause.WRITE_TO_READONLY, reads)
            pa = (pte & PTE_ADDR & ~(size - 1)) | (va & (size - 1))
            return Translation(va, pa, size, loc, pte, writable, reads)
        table = pte & PTE_ADDR
    raise AssertionError("unreachable")


def scan_ptes(mem: PhysMem, base: int, size: int = PAGE_4K) -> list[tuple[int, int]]:
    """All present entries in the tables covering ``[base, base + size)``."""
    out = []
    for page in range(base, base + size, PAGE_4K):
        for i, pte in enumerate(mem.read_table(page)):
            if pte & PTE_P:
                out.append((page + 8 * i, pte))
    return out


# -- TLBs ----------------------------------------------------------------------

def _merge(ranges: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Coalesce (base, size) ranges into sorted disjoint [lo, hi) spans."""
    out: list[list[int]] = []
    for base, size in sorted(ranges):
        if out and base <= out[-1][1]:
            out[-1][1] = max(out[-1][1], base + size)
        else:
            out.append([base, base + size])
    return [(lo, hi) for lo, hi in out]


@dataclass(frozen=True)
class TLBConfig:
    """Entries and associativity per page size, for the L1 and L2 TLBs."""

    l1: dict[int, tuple[int, int]]
    l2: dict[int, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        for level in (self.l1, self.l2):
            for size, (entries, ways) in level.items():
                if size not in PAGE_SIZES:
                    raise ValueError(f"unsupported page size {size:#x}")
                if entries <= 0 or ways <= 0 or entries % ways:
                    raise ValueError(f"bad TLB geometry {entries}/{ways} for {size:#x}")

    def coverage(self, page_size: int) -> int:
        entries = self.l1.get(page_size, (0, 1))[0] + self.l2.get(page_size, (0, 1))[0]
        return entries * page_size


IVYBRIDGE_TLB = TLBConfig(
    l1={PAGE_4K: (64, 4), PAGE_2M: (32, 4), PAGE_1G: (4, 4)},
    l2={PAGE_4K: (512, 4)},
)
OPTERON_TLB = TLBConfig(
    l1={PAGE_4K: (64, 64), PAGE_2M: (64, 64), PAGE_1G: (64, 64)},
    l2={PAGE_4K: (1024, 8), PAGE_2M: (1024, 8), PAGE_1G: (1024, 8)},
)


class TLBEntry:
    __slots__ = ("frame", "size", "writable", "leaf", "dirty")

    def __init__(self, frame: int, size: int, writable: bool, leaf: int, dirty: bool):
        self.frame = frame
        self.size = size
        self.writable = writable
        self.leaf = leaf
        self.dirty = dirty


class TLB:
    """Set-associative TLB for one page size, LRU within each set."""

    def __init__(self, entries: int, ways: int, page_size: int):
        self.entries = entries
        self.ways = ways
        self.page_size = page_size
        self.shift = page_size.bit_length() - 1
        self.nsets = entries // ways
        self.sets: list[OrderedDict[int, TLBEntry]] = [OrderedDict() for _ in range(self.nsets)]

    def lookup(self, va: int) -> TLBEntry | None:
        vpn = va >> self.shift
        s = self.sets[vpn % self.nsets]
        e = s.get(vpn)
        if e is not None:
            s.move_to_end(vpn)
        return e

    def insert(self, va: int, entry: TLBEntry) -> None:
        vpn = va >> self.shift
        s = self.sets[vpn % self.nsets]
        if vpn in s:
            s.move_to_end(vpn)
        elif len(s) >= self.ways:
            s.popitem(last=False)
        s[vpn] = entry

    def invalidate_ranges(self, ranges: list[tuple[int, int]]) -> int:
        spans = _merge(ranges)
        starts = [lo for lo, _ in spans]
        removed = 0
        for s in self.sets:
            if not s:
                continue
            doomed = []
            for vpn in s:
                lo = vpn << self.shift
                hi = lo + self.page_size
                i = bisect.bisect_right(starts, hi - 1) - 1
                if i >= 0 and spans[i][1] > lo:
                    doomed.append(vpn)
            for vpn in doomed:
                del s[vpn]
            removed += len(doomed)
        return removed

    def clear(self) -> None:
        for s in self.sets:
            s.clear()

    def __len__(self) -> int:
        return sum(len(s) for s in self.sets)


class FlushMode(enum.Enum):
    FULL = "full"
    SELECTIVE = "selective"
    DEFAULT = "default"


@dataclass
class TUCounters:
    accesses: int = 0
    tlb_hits: int = 0
    l2_hits: int = 0
    tlb_misses: int = 0
    walk_memory_reads: int = 0
    faults: int = 0
    full_flushes: int = 0
    selective_flushes: int = 0
    invlpg: int = 0
    root_switches: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


class TranslationUnit:
    """One core's MMU: translation root, TLBs and their counters."""

    def __init__(self, mem: PhysMem, config: TLBConfig = IVYBRIDGE_TLB, core_id: int = 0):
        self.mem = mem
        self.config = config
        self.core_id = core_id
        self.root: int | None = None
        self.counters = TUCounters()
        self._l1 = {size: TLB(e, w, size) for size, (e, w) in sorted(config.l1.items())}
        self._l2 = {size: TLB(e, w, size) for size, (e, w) in sorted(config.l2.items())}
        self._l1_list = list(self._l1.values())
        self._l2_list = [(tlb, self._l1.get(size)) for size, tlb in self._l2.items()]

    def tlbs(self) -> list[TLB]:
        return self._l1_list + list(self._l2.values())

    def set_root(self, root: int) -> None:
        if root % PAGE_4K:
            raise InvalidRoot(f"root {root:#x} is not 4 KiB aligned")
        if not 0 <= root < self.mem.size:
            raise InvalidRoot(f"root {root:#x} outside physical memory")
        self.root = root
        self.counters.root_switches += 1
        self.flush_full()

    # -- translation -------------------------------------------------------

    def _translate(self, va: int, write: bool) -> TLBEntry | Fault:
        c = self.counters
        if self.root is None or not is_canonical(va):
            c.faults += 1
            return Fault(va, Access.WRITE if write else Access.READ, FaultCause.NO_TRANSLATION_ROOT)
        c.accesses += 1
        entry = None
        for tlb in self._l1_list:
            entry = tlb.lookup(va)
            if entry is not None:
                break
        if entry is None:
            for tlb, l1 in self._l2_list:
                entry = tlb.lookup(va)
                if entry is not None:
                    c.l2_hits += 1
                    if l1 is not None:
                        l1.insert(va, entry)
                    break
        if entry is not None:
            c.tlb_hits += 1
            if write:
                if not entry.writable:
                    c.faults += 1
                    return Fault(va, Access.WRITE, FaultCause.WRITE_TO_READONLY)
                if not entry.dirty:
                    self.mem.write_u64(entry.leaf, self.mem.read_u64(entry.leaf) | PTE_D)
                    entry.dirty = True
            return entry
        c.tlb_misses += 1
        t = walk(self.mem, self.root, va, Access.WRITE if write else Access.READ)
        if isinstance(t, Fault):
            c.walk_memory_reads += t.walk_reads
            c.faults += 1
            return t
        c.walk_memory_reads += t.reads
        pte = t.leaf_pte | PTE_A | (PTE_D if write else 0)
        if pte != t.leaf_pte:
            self.mem.write_u64(t.leaf_loc, pte)
        entry = TLBEntry(t.pa - (va & (t.page_size - 1)), t.page_size, t.writable,
                         t.leaf_loc, bool(pte & PTE_D))
        l1 = self._l1.get(t.page_size)
        if l1 is not None:
            l1.insert(va, entry)
        l2 = self._l2.get(t.page_size)
        if l2 is not None:
            l2.insert(va, entry)
        return entry

    def translate(self, va: int, access: Access = Access.READ) -> int | Fault:
        """Physical address for ``va``, updating TLBs and status bits like a real access."""
        e = self._translate(va, access is Access.WRITE)
        if isinstance(e, Fault):
            return e
        return e.frame | (va & (e.size - 1))

    def access(self, va: int, kind: Access, width: int = 8, value: int = 0) -> int | None | Fault:
        """Perform one load or store.  Loads return the value read, stores ``None``."""
        if width not in (1, 2, 4, 8) or (va & 0xFFF) + width > PAGE_4K:
            raise ValueError(f"bad access width {width} at {va:#x}")
        write = kind is Access.WRITE
        e = self._translate(va, write)
        if isinstance(e, Fault):
            return e
        pa = e.frame | (va & (e.size - 1))
        if write:
            self.mem.write(pa, value.to_bytes(width, "little"))
            return None
        return int.from_bytes(self.mem.read(pa, width), "little")

    def rmw_xor(self, va: int, value: int) -> Fault | None:
        """64-bit read-modify-write with a single translation."""
        e = self._translate(va, True)
        if isinstance(e, Fault):
            return e
        pa = e.frame | (va & (e.size - 1))
        mem = self.mem
        mem.write_u64(pa, mem.read_u64(pa) ^ value)
        return None

    def read_bytes(self, va: int, n: int) -> bytes | Fault:
        chunks = []
        while n > 0:
            e = self._translate(va, False)
            if isinstance(e, Fault):
                return e
            off = va & (e.size - 1)
            take = min(n, e.size - off)
            chunks.append(self.mem.read(e.frame + off, take))
            va += take
            n -= take
        return b"".join(chunks)

    def write_bytes(self, va: int, data: bytes) -> Fault | None:
        pos = 0
        while pos < len(data):
            e = self._translate(va, True)
            if isinstance(e, Fault):
                return e
            off = va & (e.size - 1)
            take = min(len(data) - pos, e.size - off)
            self.mem.write(e.frame + off, data[pos:pos + take])
            va += take
            pos += take
        return None

    # -- flushing ------------------------------------------------------------

    def flush_full(self) -> None:
        for tlb in self.tlbs():
            tlb.clear()
        self.counters.full_flushes += 1

    def flush_selective(self, ranges: list[tuple[int, int]]) -> None:
        for tlb in self.tlbs():
            tlb.invalidate_ranges(ranges)
        self.counters.selective_flushes += 1
        self.counters.invlpg += len(ranges)

    def flush(self, mode: FlushMode, ranges: list[tuple[int, int]] = (),
              threshold: int = 1, pages: int | None = None) -> None:
        """Invalidate translations.

        ``ranges`` are (va, size) pairs.  Under the default policy up to
        ``threshold`` pages are flushed selectively, more cause a full flush.
        """
        ranges = [(r, PAGE_4K) if isinstance(r, int) else r for r in ranges]
        if mode is FlushMode.FULL:
            self.flush_full()
            return
        if mode is FlushMode.DEFAULT:
            npages = len(ranges) if pages is None else pages
            if npages > threshold:
                self.flush_full()
                return
        if ranges:
            self.flush_selective(ranges)

    def tlb_occupancy(self) -> int:
        return sum(len(t) for t in self.tlbs())
