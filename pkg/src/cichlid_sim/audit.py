"""Independent checks of the kernel's safety invariants.

Everything here is recomputed from the derivation database and raw
page-table memory; none of it trusts the kernel's own bookkeeping beyond
knowing which objects are page tables.
"""

from __future__ import annotations

import bisect
from collections import Counter
from dataclasses import dataclass

from .capsys import CapSpace, CapType, Rights
from .kernelapi import LEAF_SIZE as _LEAF_SIZE, Kernel
from .physmem import PTE_ADDR, PTE_P, PTE_PS, PTE_RW, LEVEL_SHIFTS, scan_ptes


class AuditError(AssertionError):
    pass


@dataclass(frozen=True)
class Leaf:
    va: int
    pa: int
    size: int
    writable: bool


class Authority:
    """Physical ranges a capability space may read, and may write."""

    def __init__(self, space: CapSpace):
        read: list[tuple[int, int]] = []
        write: list[tuple[int, int]] = []
        for _, cap in space.handles():
            t = cap.cap_type
            if t is CapType.FRAME:
                if cap.rights & Rights.READ:
                    read.append((cap.base, cap.base + cap.size))
                if cap.rights & Rights.WRITE:
                    write.append((cap.base, cap.base + cap.size))
            elif t.is_table and cap.rights & Rights.READ:
                read.append((cap.base, cap.base + cap.size))
        self.read = _union(read)
        self.write = _union(write)

    @staticmethod
    def _covers(spans, lo, hi) -> bool:
        i = bisect.bisect_right(spans, (lo, float("inf"))) - 1
        return i >= 0 and spans[i][0] <= lo and hi <= spans[i][1]

    def allows(self, pa: int, size: int, write: bool) -> bool:
        spans = self.write if write else self.read
        return self._covers(spans, pa, pa + size)


def _union(spans):
    out: list[list[int]] = []
    for lo, hi in sorted(spans):
        if out and lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return [tuple(s) for s in out]


def reachable_leaves(kernel: Kernel, root: int) -> list[Leaf]:
    """Every leaf translation reachable from ``root`` by reading raw memory."""
    mem = kernel.mem
    out = []

    def visit(table, level, va, writable):
        shift = LEVEL_SHIFTS[level]
        for i, pte in enumerate(mem.read_table(table)):
            if not pte & PTE_P:
                continue
            v = va | (i << shift)
            w = writable and bool(pte & PTE_RW)
            if level == 3 or (level > 0 and pte & PTE_PS):
                size = 1 << shift
                out.append(Leaf(v, pte & PTE_ADDR & ~(size - 1), size, w))
            else:
                visit(pte & PTE_ADDR, level + 1, v, w)

    visit(root, 0, 0, True)
    return out


def check_safety(kernel: Kernel, space: CapSpace) -> int:
    """Every translation a core can use must be authorized by ``space``.

    Checks both fresh walks from each installed root and every cached TLB
    entry, since a stale TLB entry would be just as much a leak.  Returns
    the number of translations checked.
    """
    auth = Authority(space)
    checked = 0
    for tu in kernel.cores:
        if tu.root is None:
            continue
        for leaf in reachable_leaves(kernel, tu.root):
            checked += 1
            if not auth.allows(leaf.pa, leaf.size, False):
                raise AuditError(f"unauthorized read mapping {leaf}")
            if leaf.writable and not auth.allows(leaf.pa, leaf.size, True):
                raise AuditError(f"unauthorized write mapping {leaf}")
        for tlb in tu.tlbs():
            for s in tlb.sets:
                for vpn, e in s.items():
                    checked += 1
                    if not auth.allows(e.frame, e.size, False):
                        raise AuditError(f"stale TLB entry for va {vpn << tlb.shift:#x} -> {e.frame:#x}")
                    if e.writable and not auth.allows(e.frame, e.size, True):
                        raise AuditError(f"stale writable TLB entry for va {vpn << tlb.shift:#x}")
    return checked


def check_type_exclusion(kernel: Kernel) -> None:
    """No byte is covered by both a Frame and a CNode or page-table object."""
    spans = []
    for obj in kernel.caps.db.objects():
        t = obj.cap_type
        if t is CapType.FRAME:
            spans.append((obj.base, obj.end, "frame"))
        elif t is CapType.CNODE or t.is_table:
            spans.append((obj.base, obj.end, "meta"))
    spans.sort()
    end = {"frame": -1, "meta": -1}
    for lo, hi, kind in spans:
        other = "meta" if kind == "frame" else "frame"
        if lo < end[other]:
            raise AuditError(f"{kind} object at {lo:#x} overlaps a {other} object")
        end[kind] = max(end[kind], hi)


def check_partition(kernel: Kernel) -> None:
    """Children are disjoint and inside their parent."""
    for obj in kernel.caps.db.objects():
        prev = obj.base
        for child in obj.children:
            if child.base < prev or child.end > obj.end:
                raise AuditError(f"child {child!r} of {obj!r} overlaps or escapes")
            prev = child.end


def check_one_pte(kernel: Kernel) -> None:
    """Present leaf PTEs per target equal mapped Frame copies per target.

    The left side comes from scanning raw memory of all live tables.
    """
    db = kernel.caps.db
    in_memory: Counter = Counter()
    for obj in db.objects():
        t = obj.cap_type
        if not t.is_table:
            continue
        for loc, pte in scan_ptes(kernel.mem, obj.base):
            if t is CapType.PML4:
                continue
            leaf = t is CapType.PT or pte & PTE_PS
            if leaf:
                in_memory[pte & PTE_ADDR] += 1
    recorded: Counter = Counter()
    for cap in db.capabilities():
        rec = cap.mapping
        if rec is None or not rec.leaf:
            continue
        pte = kernel.mem.read_u64(rec.table.base + 8 * rec.entry)
        if not pte & PTE_P or (pte & PTE_ADDR) != cap.base:
            raise AuditError(f"mapping record of {cap!r} names a stale entry")
        recorded[cap.base] += 1
    if in_memory != recorded:
        raise AuditError(f"PTE/record mismatch: {in_memory - recorded} vs {recorded - in_memory}")


def check_revoked(kernel: Kernel, ranges: list[tuple[int, int]]) -> None:
    """No present leaf PTE in any live table points into a revoked range."""
    spans = _union((lo, lo + size) for lo, size in ranges)
    starts = [lo for lo, _ in spans]
    for obj in kernel.caps.db.objects():
        t = obj.cap_type
        if not t.is_table or t is CapType.PML4:
            continue
        for loc, pte in scan_ptes(kernel.mem, obj.base):
            if t is CapType.PT or pte & PTE_PS:
                size = _LEAF_SIZE[t]
                pa = pte & PTE_ADDR & ~(size - 1)
                i = bisect.bisect_right(starts, pa + size - 1) - 1
                if i >= 0 and pa < spans[i][1]:
                    raise AuditError(f"PTE at {loc:#x} still targets revoked {pa:#x}")


def check_all(kernel: Kernel, space: CapSpace | None = None) -> None:
    check_partition(kernel)
    check_type_exclusion(kernel)
    check_one_pte(kernel)
    check_safety(kernel, space or kernel.space)


__all__ = ["AuditError", "Authority", "Leaf", "reachable_leaves", "check_safety",
           "check_type_exclusion", "check_partition", "check_one_pte", "check_revoked",
           "check_all"]
