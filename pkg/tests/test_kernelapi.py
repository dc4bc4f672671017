import pytest

from cichlid_sim import audit
from cichlid_sim.capsys import CapType, Rights
from cichlid_sim.errors import (AlreadyMapped, EntryOccupied, InvalidEntry, NotMapped,
                                RightsExceeded, RuleViolation, UnhandledFault, WrongType)
from cichlid_sim.kernelapi import (MAPPING_RULES, MAX_UPCALLS, Kernel, Rule, check_rule)
from cichlid_sim.physmem import (PAGE_1G, PAGE_2M, PAGE_4K, PTE_A, PTE_D, PTE_RW, Access,
                                 FaultCause, FlushMode)
from cichlid_sim.trace import Trace

MiB = 1 << 20
TABLES = (CapType.PML4, CapType.PDPT, CapType.PD, CapType.PT)


class Env:
    """A 2 GiB kernel with one PML4 -> PDPT -> PD -> PT chain covering VA 0..2M."""

    def __init__(self, **kw):
        self.k = Kernel(2 << 30, **kw)
        self.sp = self.k.space
        self.ram = self.sp.retype(self.k.untyped, CapType.RAM, 64 * MiB, offset=64 * MiB)[0]
        self.t = {t: self.sp.retype(self.ram, t, PAGE_4K, offset=i * PAGE_4K)[0]
                  for i, t in enumerate(TABLES)}
        self.next = 16
        for parent, child in zip(TABLES, TABLES[1:]):
            self.k.invoke_map(self.sp, self.t[parent], 0, [(self.t[child], Rights.RW)])
        self.k.install_vroot(self.sp, self.t[CapType.PML4], 0)
        self.tu = self.k.cores[0]

    def frames(self, n, size=PAGE_4K):
        off = -(-self.next * PAGE_4K // size) * size
        hs = self.sp.retype(self.ram, CapType.FRAME, size, n, offset=off)
        self.next = (off + n * size) // PAGE_4K
        return hs

    def map4k(self, entry, frames, flags=Rights.RW):
        return self.k.invoke_map(self.sp, self.t[CapType.PT], entry, [(f, flags) for f in frames])

    def pte(self, entry, table=CapType.PT):
        return self.k.mem.read_u64(self.sp.lookup(self.t[table]).base + 8 * entry)


@pytest.fixture
def env():
    return Env()


# -- mapping rules ---------------------------------------------------------------


def test_rule_table_is_total():
    assert len(MAPPING_RULES) == len(CapType) ** 2
    allowed = {k: v for k, v in MAPPING_RULES.items() if v is not Rule.DENY}
    assert allowed == {
        (CapType.PML4, CapType.PDPT): Rule.TABLE,
        (CapType.PDPT, CapType.PD): Rule.TABLE,
        (CapType.PD, CapType.PT): Rule.TABLE,
        (CapType.PDPT, CapType.FRAME): Rule.LEAF,
        (CapType.PD, CapType.FRAME): Rule.LEAF,
        (CapType.PT, CapType.FRAME): Rule.LEAF,
        **{(CapType.PT, t): Rule.STATUS for t in TABLES},
    }


@pytest.mark.parametrize("table, arg, size, flags", [
    (CapType.PML4, CapType.FRAME, PAGE_1G, Rights.RW),
    (CapType.PT, CapType.FRAME, PAGE_2M, Rights.RW),
    (CapType.PD, CapType.FRAME, PAGE_4K, Rights.RW),
    (CapType.PDPT, CapType.FRAME, PAGE_2M, Rights.RW),
    (CapType.PT, CapType.PD, PAGE_4K, Rights.RW),
    (CapType.PT, CapType.CNODE, PAGE_4K, Rights.READ),
    (CapType.PD, CapType.PD, PAGE_4K, Rights.RW),
    (CapType.PT, CapType.UNTYPED, PAGE_4K, Rights.READ),
    (CapType.PT, CapType.RAM, PAGE_4K, Rights.READ),
])
def test_rule_violations(table, arg, size, flags):
    with pytest.raises(RuleViolation):
        check_rule(table, arg, size, flags)


# -- map ---------------------------------------------------------------------------


def test_map_and_translate(env):
    f = env.frames(3)
    env.map4k(5, f)
    base = env.sp.lookup(f[0]).base
    for i in range(3):
        assert env.tu.translate((5 + i) * PAGE_4K + 0x10) == base + i * PAGE_4K + 0x10
    assert env.k.mapped == 3 + 3
    audit.check_one_pte(env.k)
    audit.check_safety(env.k, env.sp)


def test_large_pages(env):
    (f2,) = env.frames(1, PAGE_2M)
    env.k.invoke_map(env.sp, env.t[CapType.PD], 1, [(f2, Rights.RW)])
    assert env.tu.translate(PAGE_2M + 0x1234) == env.sp.lookup(f2).base + 0x1234
    r = env.sp.retype(env.k.untyped, CapType.RAM, PAGE_1G, offset=PAGE_1G)[0]
    (f1,) = env.sp.retype(r, CapType.FRAME, PAGE_1G)
    env.k.invoke_map(env.sp, env.t[CapType.PDPT], 1, [(f1, Rights.READ)])
    assert env.tu.translate(PAGE_1G + 5) == PAGE_1G + 5
    assert env.tu.translate(PAGE_1G, Access.WRITE).cause is FaultCause.WRITE_TO_READONLY


def test_failed_batch_writes_nothing(env):
    f = env.frames(4)
    env.map4k(2, [f[3]])
    ro = env.sp.copy(f[3], rights=Rights.READ)
    with pytest.raises(EntryOccupied) as exc:
        env.map4k(0, f[:3])
    assert exc.value.index == 2
    with pytest.raises(RightsExceeded) as exc:
        env.k.invoke_map(env.sp, env.t[CapType.PT], 10, [(f[0], Rights.RW), (ro, Rights.RW)])
    assert exc.value.index == 1
    assert env.pte(0) == env.pte(1) == env.pte(10) == 0
    assert env.sp.resolve(f[0]).mapping is None


def test_map_errors(env):
    f = env.frames(2)
    env.map4k(0, [f[0]])
    with pytest.raises(AlreadyMapped):
        env.map4k(1, [f[0]])
    with pytest.raises(AlreadyMapped):
        env.map4k(1, [f[1], f[1]])
    with pytest.raises(InvalidEntry):
        env.map4k(511, f)
    with pytest.raises(WrongType):
        env.k.invoke_map(env.sp, f[1], 0, [(f[1], Rights.RW)])
    ro_pt = env.sp.copy(env.t[CapType.PT], rights=Rights.READ)
    with pytest.raises(RightsExceeded):
        env.k.invoke_map(env.sp, ro_pt, 3, [(f[1], Rights.RW)])
    # a copy of a mapped frame may be mapped again
    env.map4k(1, [env.sp.copy(f[0])])
    audit.check_one_pte(env.k)


def test_status_view_is_read_only(env):
    with pytest.raises(RuleViolation):
        env.map4k(7, [env.sp.copy(env.t[CapType.PT])])
    view = env.sp.copy(env.t[CapType.PT])
    env.map4k(7, [view], Rights.READ)
    with pytest.raises(RuleViolation):
        env.k.invoke_modify_flags(env.sp, env.t[CapType.PT], 7, 1, Rights.RW)
    f = env.frames(1)
    env.map4k(0, f)
    env.tu.access(0, Access.WRITE, 8, 1)
    # entry 0 of the PT, read through its own read-only view at VA 7*4K
    assert env.tu.access(7 * PAGE_4K, Access.READ, 8) & PTE_D
    assert env.tu.access(7 * PAGE_4K, Access.WRITE, 8).cause is FaultCause.WRITE_TO_READONLY


def test_new_tables_are_zeroed_but_frames_are_not(env):
    base = env.sp.lookup(env.ram).base
    env.k.mem.write(base + 100 * PAGE_4K, b"\xff" * 16)
    env.k.mem.write(base + 101 * PAGE_4K, b"\xff" * 16)
    env.sp.retype(env.ram, CapType.FRAME, PAGE_4K, offset=100 * PAGE_4K)
    env.sp.retype(env.ram, CapType.PT, PAGE_4K, offset=101 * PAGE_4K)
    assert env.k.mem.read(base + 100 * PAGE_4K, 2) == b"\xff\xff"
    assert env.k.mem.read(base + 101 * PAGE_4K, 2) == b"\x00\x00"
    zk = Env(zero_frames=True)
    zbase = zk.sp.lookup(zk.ram).base
    zk.k.mem.write(zbase + 100 * PAGE_4K, b"\xff")
    zk.sp.retype(zk.ram, CapType.FRAME, PAGE_4K, offset=100 * PAGE_4K)
    assert zk.k.mem.read(zbase + 100 * PAGE_4K, 1) == b"\x00"


# -- unmap, modify_flags, clear_dirty_bits ---------------------------------------------


def test_unmap_flushes_and_ignores_absent(env):
    f = env.frames(2)
    env.map4k(0, f)
    env.tu.translate(0)
    r = env.k.invoke_unmap(env.sp, env.t[CapType.PT], 0, 4)
    assert r.outcomes == ["unmapped", "unmapped", "absent", "absent"]
    assert env.tu.translate(0).cause is FaultCause.NOT_PRESENT
    assert env.sp.resolve(f[0]).mapping is None
    env.map4k(0, f)


def test_unmap_of_a_table_entry_covers_its_span(env):
    f = env.frames(1)
    env.map4k(3, f)
    env.tu.translate(3 * PAGE_4K)
    env.k.invoke_unmap(env.sp, env.t[CapType.PD], 0)
    assert env.tu.translate(3 * PAGE_4K).cause is FaultCause.NOT_PRESENT
    # the PT keeps its own entries and can be re-linked
    env.k.invoke_map(env.sp, env.t[CapType.PD], 0, [(env.t[CapType.PT], Rights.RW)])
    assert env.tu.translate(3 * PAGE_4K) == env.sp.lookup(f[0]).base


def test_modify_flags_keeps_status_bits(env):
    f = env.frames(2)
    env.map4k(0, f)
    env.tu.access(0, Access.WRITE, 8, 9)
    env.k.invoke_modify_flags(env.sp, env.t[CapType.PT], 0, 2, Rights.READ)
    pte = env.pte(0)
    assert pte & PTE_A and pte & PTE_D and not pte & PTE_RW
    assert env.tu.access(0, Access.WRITE, 8, 1).cause is FaultCause.WRITE_TO_READONLY
    env.k.invoke_modify_flags(env.sp, env.t[CapType.PT], 0, 2, Rights.RW)
    assert env.tu.access(0, Access.WRITE, 8, 1) is None
    with pytest.raises(NotMapped) as exc:
        env.k.invoke_modify_flags(env.sp, env.t[CapType.PT], 1, 2, Rights.READ)
    assert exc.value.index == 1
    ro = env.sp.copy(env.frames(1)[0], rights=Rights.READ)
    env.map4k(9, [ro], Rights.READ)
    with pytest.raises(RightsExceeded):
        env.k.invoke_modify_flags(env.sp, env.t[CapType.PT], 9, 1, Rights.RW)


def test_clear_dirty_bits(env):
    f = env.frames(2)
    env.map4k(0, f)
    env.tu.access(0, Access.WRITE, 8, 1)
    env.tu.access(PAGE_4K, Access.READ, 8)
    env.k.invoke_clear_dirty_bits(env.sp, env.t[CapType.PT], 0, 2)
    assert env.pte(0) & (PTE_A | PTE_D) == 0 and env.pte(1) & PTE_A == 0
    assert env.tu.counters.selective_flushes >= 1
    # the flushed entry re-walks and the next write sets D again
    env.tu.access(0, Access.WRITE, 8, 2)
    assert env.pte(0) & PTE_D


@pytest.mark.parametrize("mode, pages, full", [
    (FlushMode.DEFAULT, 1, 0), (FlushMode.DEFAULT, 2, 1), (FlushMode.FULL, 1, 1),
    (FlushMode.SELECTIVE, 8, 0),
])
def test_flush_mode_per_invocation(mode, pages, full):
    e = Env(flush_mode=mode)
    f = e.frames(pages)
    e.map4k(0, f)
    before = e.tu.counters.full_flushes
    e.k.invoke_modify_flags(e.sp, e.t[CapType.PT], 0, pages, Rights.READ)
    assert e.tu.counters.full_flushes - before == full


# -- revocation -----------------------------------------------------------------------


def test_revoke_removes_mappings(env):
    f = env.frames(1)
    alias = env.sp.copy(f[0])
    env.map4k(0, f)
    env.map4k(1, [alias])
    assert env.tu.translate(PAGE_4K) == env.tu.translate(0)
    env.sp.revoke(f[0])
    assert env.pte(1) == 0 and env.pte(0) != 0
    assert env.tu.translate(PAGE_4K).cause is FaultCause.NOT_PRESENT
    env.sp.delete(f[0])
    assert env.tu.translate(0).cause is FaultCause.NOT_PRESENT
    audit.check_one_pte(env.k)


def test_destroying_the_root_table_clears_the_core(env):
    env.sp.revoke(env.ram)
    env.sp.delete(env.ram)
    assert env.tu.root is None
    assert env.k.mapped == 0


def test_install_vroot_requires_pml4(env):
    with pytest.raises(WrongType):
        env.k.install_vroot(env.sp, env.t[CapType.PD], 0)


def test_identify(env):
    base, size, t = env.k.invoke_identify(env.sp, env.t[CapType.PD])
    assert (base, size, t) == (64 * MiB + 2 * PAGE_4K, PAGE_4K, CapType.PD)


# -- faults ----------------------------------------------------------------------------


def test_fault_upcall_and_retry(env):
    f = env.frames(1)
    seen = []

    def handler(fault):
        seen.append(fault)
        env.map4k(0, f)

    proc = env.k.spawn(handler=handler)
    proc.write(8, 77)
    assert proc.read(8) == 77
    assert len(seen) == 1 and seen[0].cause is FaultCause.NOT_PRESENT
    assert proc.upcalls == env.k.upcalls == 1


def test_unhandled_faults_terminate():
    e = Env(trace=Trace(enabled=True))
    proc = e.k.spawn()
    with pytest.raises(UnhandledFault):
        proc.read(0)
    assert proc.terminated == "no fault handler"
    with pytest.raises(UnhandledFault):
        proc.read(0)

    lazy = e.k.spawn(handler=lambda fault: None)
    with pytest.raises(UnhandledFault) as exc:
        lazy.read(0)
    assert exc.value.reason == "double fault" and lazy.upcalls == 1
    names = [r["name"] for r in e.k.trace.records]
    assert names.count("terminate") == 2 and names.count("upcall") == 1


def test_fault_storm_is_bounded(env):
    va = [0]

    def handler(fault):
        # always "fixes" a different address, never the faulting one
        va[0] += PAGE_4K

    proc = env.k.spawn(handler=handler)
    pages = iter(range(1, 100))

    with pytest.raises(UnhandledFault) as exc:
        env.k.run(proc, lambda: env.tu.translate(next(pages) * PAGE_4K))
    assert exc.value.reason == "fault storm"
    assert proc.upcalls == MAX_UPCALLS


def test_trace_records_and_deltas():
    e = Env(trace=Trace(enabled=True))
    f = e.frames(2)
    e.map4k(0, f)
    with pytest.raises(AlreadyMapped):
        e.map4k(0, f)
    recs = [r for r in e.k.trace.records if r["name"] == "map"]
    assert [r["result"] for r in recs[-2:]] == ["ok", "AlreadyMapped"]
    assert recs[-2]["delta"].get("mapped") == 2
    assert e.k.trace.totals()["map"] == e.k.trace.counts["map"]
