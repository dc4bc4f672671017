"""Kernel invocations on page-table capabilities, and fault reflection.

The :class:`Kernel` is the only code that writes page-table memory.  Every
invocation is validated in full before any entry is written, so a failing
batch leaves memory untouched.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .capsys import (CapObject, Capability, CapSpace, CapType, Rights, bootstrap, _jsonable)
from .errors import (AlreadyMapped, EntryOccupied, InvalidEntry, NotMapped, RightsExceeded,
                     RuleViolation, SimError, UnhandledFault, WrongType)
from .physmem import (ENTRIES, PAGE_1G, PAGE_2M, PAGE_4K, PTE_A, PTE_ADDR, PTE_D, PTE_P, PTE_PS,
                      PTE_RW, PTE_US, Access, Fault, FlushMode, PhysMem, TLBConfig,
                      TranslationUnit, IVYBRIDGE_TLB)
from .trace import Trace

# VA shift indexed by each table type's entries
LEVEL_SHIFT = {CapType.PML4: 39, CapType.PDPT: 30, CapType.PD: 21, CapType.PT: 12}
LEAF_SIZE = {CapType.PDPT: PAGE_1G, CapType.PD: PAGE_2M, CapType.PT: PAGE_4K}
INVOCATIONS = ("map", "unmap", "modify_flags", "clear_dirty_bits", "identify", "install_vroot")
MAX_UPCALLS = 16


class Rule(enum.Enum):
    DENY = "deny"
    TABLE = "table"      # next-level table
    LEAF = "leaf"        # data frame of the level's page size
    STATUS = "status"    # read-only view of a page table


def _rules() -> dict[tuple[CapType, CapType], Rule]:
    rules = {(t, a): Rule.DENY for t in CapType for a in CapType}
    rules[CapType.PML4, CapType.PDPT] = Rule.TABLE
    rules[CapType.PDPT, CapType.PD] = Rule.TABLE
    rules[CapType.PDPT, CapType.FRAME] = Rule.LEAF
    rules[CapType.PD, CapType.PT] = Rule.TABLE
    rules[CapType.PD, CapType.FRAME] = Rule.LEAF
    rules[CapType.PT, CapType.FRAME] = Rule.LEAF
    for t in (CapType.PML4, CapType.PDPT, CapType.PD, CapType.PT):
        rules[CapType.PT, t] = Rule.STATUS
    return rules


MAPPING_RULES: dict[tuple[CapType, CapType], Rule] = _rules()


def check_rule(table_type: CapType, arg_type: CapType, arg_size: int, flags: Rights) -> Rule:
    """Decide whether ``arg`` may be installed in a table of ``table_type``."""
    rule = MAPPING_RULES[table_type, arg_type]
    if rule is Rule.DENY:
        raise RuleViolation(f"{arg_type.name} cannot be mapped in a {table_type.name}")
    if rule is Rule.LEAF and arg_size != LEAF_SIZE[table_type]:
        raise RuleViolation(f"{table_type.name} maps {LEAF_SIZE[table_type]:#x}-byte frames, not {arg_size:#x}")
    if rule is Rule.STATUS and flags & Rights.WRITE:
        raise RuleViolation("page tables may only be mapped read-only")
    return rule


@dataclass
class MappingRecord:
    table: CapObject
    entry: int
    count: int = 1
    flags: Rights = Rights.READ
    leaf: bool = True


@dataclass
class InvocationResult:
    status: str = "ok"
    outcomes: list[str] = field(default_factory=list)


def pte_for(pa: int, flags: Rights, large: bool) -> int:
    pte = PTE_P | PTE_US | (pa & PTE_ADDR)
    if flags & Rights.WRITE:
        pte |= PTE_RW
    if large:
        pte |= PTE_PS
    return pte


def _invocation(fn):
    name = fn.__name__.removeprefix("invoke_")

    @functools.wraps(fn)
    def wrapper(self, space, *args, **kwargs):
        trace = self.trace
        before = self.snapshot() if trace.enabled else None
        try:
            out = fn(self, space, *args, **kwargs)
        except SimError as exc:
            self._log(name, space, args, kwargs, type(exc).__name__, before)
            raise
        self._log(name, space, args, kwargs, "ok", before)
        return out

    return wrapper


class Process:
    """A simulated user process: a capability space, a core and a fault handler."""

    def __init__(self, kernel: Kernel, space: CapSpace, core: int = 0,
                 handler: Callable[[Fault], None] | None = None):
        self.kernel = kernel
        self.space = space
        self.core = core
        self.handler = handler
        self.upcalls = 0
        self.terminated: str | None = None

    @property
    def tu(self) -> TranslationUnit:
        return self.kernel.cores[self.core]

    def read(self, va: int, width: int = 8) -> int:
        return self.kernel.run(self, lambda: self.tu.access(va, Access.READ, width))

    def write(self, va: int, value: int, width: int = 8) -> None:
        self.kernel.run(self, lambda: self.tu.access(va, Access.WRITE, width, value))

    def rmw_xor(self, va: int, value: int) -> None:
        self.kernel.run(self, lambda: self.tu.rmw_xor(va, value))

    def read_bytes(self, va: int, n: int) -> bytes:
        return self.kernel.run(self, lambda: self.tu.read_bytes(va, n))

    def write_bytes(self, va: int, data: bytes) -> None:
        self.kernel.run(self, lambda: self.tu.write_bytes(va, data))


class Kernel:
    """Capability kernel over one emulated physical memory."""

    def __init__(self, total_phys_bytes: int, tlb: TLBConfig = IVYBRIDGE_TLB, cores: int = 1,
                 trace: Trace | None = None, flush_mode: FlushMode = FlushMode.DEFAULT,
                 flush_threshold: int = 1, zero_frames: bool = False):
        self.space, self.untyped = bootstrap(total_phys_bytes, trace)
        self.caps = self.space.system
        self.caps.observer = self
        self.trace = self.caps.trace
        self.mem = PhysMem(total_phys_bytes)
        self.cores = [TranslationUnit(self.mem, tlb, i) for i in range(cores)]
        self.vroots: list[CapObject | None] = [None] * cores
        self.flush_mode = flush_mode
        self.flush_threshold = flush_threshold
        self.zero_frames = zero_frames
        self.processes: list[Process] = []
        self.upcalls = 0
        self.mapped = 0
        # table object -> {entry index: capability installed there}
        self.entries: dict[CapObject, dict[int, Capability]] = {}

    @classmethod
    def from_machine(cls, machine, **kwargs) -> Kernel:
        kwargs.setdefault("flush_threshold", machine.flush_threshold)
        return cls(machine.total, machine.tlb, machine.cores, **kwargs)

    # -- tracing -------------------------------------------------------------

    def snapshot(self) -> dict[str, int]:
        out = {"caps": len(self.caps.db), "mapped": self.mapped, "upcalls": self.upcalls}
        for tu in self.cores:
            for key in ("full_flushes", "selective_flushes", "invlpg"):
                out[key] = out.get(key, 0) + getattr(tu.counters, key)
        return out

    def _log(self, name, space, args, kwargs, result, before) -> None:
        delta = None
        if before is not None:
            after = self.snapshot()
            delta = {k: after[k] - before.get(k, 0) for k in after if after[k] != before.get(k, 0)}
        payload = {f"a{i}": _arg(a) for i, a in enumerate(args)}
        payload.update({k: _arg(v) for k, v in kwargs.items()})
        self.trace.record(name, space.pid, payload, result, delta)

    def invocation_count(self) -> int:
        return sum(self.trace.counts[n] for n in INVOCATIONS)

    # -- capability observer ---------------------------------------------------

    def object_created(self, obj: CapObject) -> None:
        t = obj.cap_type
        if t.is_table or t is CapType.CNODE or (t is CapType.FRAME and self.zero_frames):
            self.mem.zero(obj.base, obj.size)

    def capability_removed(self, cap: Capability) -> None:
        if cap.mapping is not None:
            rec = cap.mapping
            ranges = self._entry_ranges(rec.table, rec.entry)
            span = 1 << LEVEL_SHIFT[rec.table.cap_type]
            self._clear_entry(rec.table, rec.entry)
            self._flush(ranges, pages=1 if rec.leaf else span // PAGE_4K)

    def object_destroyed(self, obj: CapObject) -> None:
        installed = self.entries.pop(obj, None)
        if installed:
            for index, cap in installed.items():
                self.mem.write_u64(obj.base + 8 * index, 0)
                cap.mapping = None
                self.mapped -= 1
        for i, root in enumerate(self.vroots):
            if root is obj:
                self.vroots[i] = None
                tu = self.cores[i]
                tu.root = None
                tu.flush_full()

    # -- helpers -------------------------------------------------------------

    def _clear_entry(self, table: CapObject, entry: int) -> None:
        self.mem.write_u64(table.base + 8 * entry, 0)
        cap = self.entries[table].pop(entry)
        cap.mapping = None
        self.mapped -= 1

    def prefixes(self, table: CapObject) -> list[tuple[CapObject, int]]:
        """Every (PML4 object, VA base) through which ``table`` is reachable."""
        if table.cap_type is CapType.PML4:
            return [(table, 0)]
        out = []
        for cap in table.copies:
            rec = cap.mapping
            if rec is None or rec.leaf:
                continue
            shift = LEVEL_SHIFT[rec.table.cap_type]
            for root, va in self.prefixes(rec.table):
                out.append((root, va + (rec.entry << shift)))
        return out

    def _entry_ranges(self, table: CapObject, entry: int, count: int = 1) -> list[tuple[CapObject, int, int]]:
        shift = LEVEL_SHIFT[table.cap_type]
        span = 1 << shift
        out = []
        for root, va in self.prefixes(table):
            for e in range(entry, entry + count):
                out.append((root, _sext(va + (e << shift)), span))
        return out

    def _flush(self, ranges: list[tuple[CapObject, int, int]], mode: FlushMode | None = None,
               pages: int | None = None) -> None:
        if not ranges:
            return
        mode = self.flush_mode if mode is None else mode
        for i, root in enumerate(self.vroots):
            if root is None:
                continue
            mine = [(va, size) for r, va, size in ranges if r is root]
            if not mine:
                continue
            npages = sum(1 if size == PAGE_4K else size // PAGE_4K for _, size in mine) if pages is None else pages
            self.cores[i].flush(mode, mine, self.flush_threshold, npages)

    def _table(self, space: CapSpace, handle: int, write: bool = True) -> Capability:
        cap = space.resolve(handle)
        if not cap.cap_type.is_table:
            raise WrongType(f"{cap.cap_type.name} is not a page table")
        if write and not cap.rights & Rights.WRITE:
            raise RightsExceeded("modifying a page table requires write rights on it")
        return cap

    @staticmethod
    def _check_range(start: int, count: int) -> None:
        if start < 0 or count < 0 or start + count > ENTRIES:
            raise InvalidEntry(f"entries [{start}, {start + count}) outside 0..{ENTRIES}")

    def _present(self, table: CapObject, start: int, count: int) -> dict[int, Capability]:
        installed = self.entries.get(table, {})
        for i in range(count):
            if start + i not in installed:
                raise NotMapped(f"entry {start + i} is not present", index=i)
        return installed

    # -- invocations -----------------------------------------------------------

    @_invocation
    def invoke_map(self, space: CapSpace, table: int, start_entry: int,
                   args: list[tuple[int, Rights]]) -> InvocationResult:
        """Install consecutive entries ``start_entry..`` of ``table``."""
        tcap = self._table(space, table)
        self._check_range(start_entry, len(args))
        tobj = tcap.obj
        installed = self.entries.get(tobj, {})
        plan = []
        seen: set[int] = set()
        for i, (handle, flags) in enumerate(args):
            cap = space.resolve(handle)
            try:
                rule = check_rule(tobj.cap_type, cap.cap_type, cap.size, flags)
            except RuleViolation as exc:
                raise RuleViolation(str(exc), index=i) from None
            if cap.mapping is not None or id(cap) in seen:
                raise AlreadyMapped("capability already has a mapping; copy it first", index=i)
            seen.add(id(cap))
            entry = start_entry + i
            if entry in installed or self.mem.read_u64(tobj.base + 8 * entry) & PTE_P:
                raise EntryOccupied(f"entry {entry} is occupied", index=i)
            if rule is Rule.LEAF and flags & Rights.WRITE and not cap.rights & Rights.WRITE:
                raise RightsExceeded("writable mapping of a read-only capability", index=i)
            if not cap.rights & Rights.READ and rule is not Rule.TABLE:
                raise RightsExceeded("capability grants no access", index=i)
            plan.append((entry, cap, flags, rule))
        installed = self.entries.setdefault(tobj, {})
        for entry, cap, flags, rule in plan:
            large = rule is Rule.LEAF and tobj.cap_type is not CapType.PT
            self.mem.write_u64(tobj.base + 8 * entry, pte_for(cap.base, flags, large))
            cap.mapping = MappingRecord(tobj, entry, 1, flags, leaf=rule is not Rule.TABLE)
            installed[entry] = cap
            self.mapped += 1
        return InvocationResult("ok", ["mapped"] * len(plan))

    @_invocation
    def invoke_unmap(self, space: CapSpace, table: int, start_entry: int, count: int = 1) -> InvocationResult:
        tcap = self._table(space, table)
        self._check_range(start_entry, count)
        tobj = tcap.obj
        installed = self.entries.get(tobj, {})
        outcomes = []
        ranges = []
        pages = 0
        prefixes = self.prefixes(tobj) if installed else []
        shift = LEVEL_SHIFT[tobj.cap_type]
        for entry in range(start_entry, start_entry + count):
            cap = installed.get(entry)
            if cap is None:
                outcomes.append("absent")
                continue
            span = 1 << shift
            pages += 1 if cap.mapping.leaf else max(1, span // PAGE_4K)
            for root, va in prefixes:
                ranges.append((root, _sext(va + (entry << shift)), span))
            self._clear_entry(tobj, entry)
            outcomes.append("unmapped")
        self._flush(ranges, pages=pages)
        return InvocationResult("ok", outcomes)

    @_invocation
    def invoke_modify_flags(self, space: CapSpace, table: int, start_entry: int, count: int,
                            new_flags: Rights) -> InvocationResult:
        tcap = self._table(space, table)
        self._check_range(start_entry, count)
        tobj = tcap.obj
        installed = self._present(tobj, start_entry, count)
        for i in range(count):
            cap = installed[start_entry + i]
            rec = cap.mapping
            if new_flags & Rights.WRITE:
                if rec.leaf and MAPPING_RULES[tobj.cap_type, cap.cap_type] is Rule.STATUS:
                    raise RuleViolation("page tables may only be mapped read-only", index=i)
                if rec.leaf and not cap.rights & Rights.WRITE:
                    raise RightsExceeded("capability lacks write rights", index=i)
        pages = 0
        for i in range(count):
            entry = start_entry + i
            cap = installed[entry]
            loc = tobj.base + 8 * entry
            pte = self.mem.read_u64(loc)
            pte = (pte | PTE_RW) if new_flags & Rights.WRITE else (pte & ~PTE_RW)
            self.mem.write_u64(loc, pte | PTE_US)
            cap.mapping.flags = new_flags
            pages += 1 if cap.mapping.leaf else (1 << LEVEL_SHIFT[tobj.cap_type]) // PAGE_4K
        self._flush(self._entry_ranges(tobj, start_entry, count=count), pages=pages)
        return InvocationResult("ok", ["modified"] * count)

    @_invocation
    def invoke_clear_dirty_bits(self, space: CapSpace, table: int, start_entry: int,
                                count: int) -> InvocationResult:
        """Clear accessed and dirty bits; always flushes the affected pages selectively."""
        tcap = self._table(space, table)
        self._check_range(start_entry, count)
        tobj = tcap.obj
        self._present(tobj, start_entry, count)
        mem = self.mem
        mask = ~(PTE_A | PTE_D)
        for entry in range(start_entry, start_entry + count):
            loc = tobj.base + 8 * entry
            mem.write_u64(loc, mem.read_u64(loc) & mask)
        self._flush(self._entry_ranges(tobj, start_entry, count=count), FlushMode.SELECTIVE)
        return InvocationResult("ok", ["cleared"] * count)

    @_invocation
    def invoke_identify(self, space: CapSpace, handle: int) -> tuple[int, int, CapType]:
        cap = space.resolve(handle)
        return cap.base, cap.size, cap.cap_type

    @_invocation
    def install_vroot(self, space: CapSpace, pml4: int, core: int | TranslationUnit = 0) -> None:
        cap = space.resolve(pml4)
        if cap.cap_type is not CapType.PML4:
            raise WrongType(f"{cap.cap_type.name} cannot be a translation root")
        index = core.core_id if isinstance(core, TranslationUnit) else core
        self.cores[index].set_root(cap.base)
        self.vroots[index] = cap.obj

    # -- processes and faults ------------------------------------------------

    def spawn(self, space: CapSpace | None = None, core: int = 0,
              handler: Callable[[Fault], None] | None = None) -> Process:
        proc = Process(self, space or self.space, core, handler)
        self.processes.append(proc)
        return proc

    def deliver_fault(self, proc: Process, fault: Fault) -> None:
        if proc.handler is None:
            self._terminate(proc, fault, "no fault handler")
        self.upcalls += 1
        proc.upcalls += 1
        self.trace.record("upcall", proc.space.pid, {"va": fault.va, "access": fault.access.value,
                                                     "cause": fault.cause.value}, "delivered")
        proc.handler(fault)

    def run(self, proc: Process, op: Callable[[], object]):
        """Run one memory operation, reflecting faults to the process's handler.

        The operation is retried after each upcall; seeing the same fault
        twice in a row terminates the process.
        """
        if proc.terminated:
            raise UnhandledFault(None, f"process terminated: {proc.terminated}")
        result = op()
        last = None
        n = 0
        while isinstance(result, Fault):
            if result == last:
                self._terminate(proc, result, "double fault")
            n += 1
            if n > MAX_UPCALLS:
                self._terminate(proc, result, "fault storm")
            self.deliver_fault(proc, result)
            last = result
            result = op()
        return result

    def _terminate(self, proc: Process, fault: Fault, reason: str):
        proc.terminated = reason
        self.trace.record("terminate", proc.space.pid, {"va": fault.va}, reason)
        raise UnhandledFault(fault, reason)

    # -- inspection ----------------------------------------------------------

    def installed(self, table: CapObject) -> dict[int, Capability]:
        return self.entries.get(table, {})

    def leaf_targets(self) -> Iterable[tuple[int, int, int]]:
        """(pa, size, pte location) for every present leaf PTE in every live table."""
        for tobj, installed in self.entries.items():
            for entry, cap in installed.items():
                if cap.mapping.leaf:
                    yield cap.base, cap.size, tobj.base + 8 * entry


def _arg(a):
    if isinstance(a, TranslationUnit):
        return a.core_id
    if isinstance(a, (list, tuple)):
        return [_arg(x) for x in a]
    return _jsonable(a)


def _sext(va: int) -> int:
    if va & (1 << 47):
        va |= 0xFFFF_0000_0000_0000
    return va
