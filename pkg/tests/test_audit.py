"""The auditor must catch violations planted behind the kernel's back."""

import pytest

from cichlid_sim import audit
from cichlid_sim.audit import AuditError, Authority
from cichlid_sim.capsys import CapType, Rights
from cichlid_sim.kernelapi import Kernel
from cichlid_sim.physmem import PAGE_4K, PTE_P, PTE_RW

MiB = 1 << 20
TABLES = (CapType.PML4, CapType.PDPT, CapType.PD, CapType.PT)


@pytest.fixture
def env():
    k = Kernel(64 * MiB)
    sp = k.space
    ram = sp.retype(k.untyped, CapType.RAM, 4 * MiB, offset=4 * MiB)[0]
    t = {ty: sp.retype(ram, ty, PAGE_4K, offset=i * PAGE_4K)[0] for i, ty in enumerate(TABLES)}
    for parent, child in zip(TABLES, TABLES[1:]):
        k.invoke_map(sp, t[parent], 0, [(t[child], Rights.RW)])
    k.install_vroot(sp, t[CapType.PML4])
    frame = sp.retype(ram, CapType.FRAME, PAGE_4K, offset=16 * PAGE_4K)[0]
    k.invoke_map(sp, t[CapType.PT], 0, [(frame, Rights.RW)])
    return k, sp, t, frame


def pt_base(env):
    k, sp, t, _ = env
    return sp.lookup(t[CapType.PT]).base


def test_clean_state_passes(env):
    k, sp, _, _ = env
    audit.check_all(k, sp)
    assert [leaf.va for leaf in audit.reachable_leaves(k, k.cores[0].root)] == [0]


def test_forged_pte_is_unauthorized(env):
    k, sp, _, _ = env
    k.mem.write_u64(pt_base(env) + 8, 40 * MiB | PTE_P | PTE_RW)
    with pytest.raises(AuditError, match="unauthorized"):
        audit.check_safety(k, sp)
    with pytest.raises(AuditError, match="mismatch"):
        audit.check_one_pte(k)


def test_writable_pte_over_read_only_authority(env):
    k, sp, t, _ = env
    other = sp.retype(k.untyped, CapType.RAM, MiB, offset=32 * MiB)[0]
    original = sp.retype(other, CapType.FRAME, PAGE_4K)[0]
    ro = sp.copy(original, rights=Rights.READ)
    k.invoke_map(sp, t[CapType.PT], 1, [(ro, Rights.READ)])
    sp.delete(original)
    audit.check_safety(k, sp)
    loc = pt_base(env) + 8
    k.mem.write_u64(loc, k.mem.read_u64(loc) | PTE_RW)
    with pytest.raises(AuditError, match="unauthorized write"):
        audit.check_safety(k, sp)


def test_stale_tlb_entry_is_caught(env):
    k, sp, t, frame = env
    tu = k.cores[0]
    tu.translate(0)
    # clear the PTE and drop the capability without telling the kernel
    k.mem.write_u64(pt_base(env), 0)
    cap = sp.resolve(frame)
    cap.mapping = None
    k.entries[sp.resolve(t[CapType.PT]).obj].pop(0)
    k.caps.observer = None
    sp.delete(frame)
    with pytest.raises(AuditError, match="stale TLB"):
        audit.check_safety(k, sp)


def test_revoked_range_check(env):
    k, sp, _, frame = env
    base = sp.lookup(frame).base
    with pytest.raises(AuditError):
        audit.check_revoked(k, [(base, PAGE_4K)])
    audit.check_revoked(k, [(base + PAGE_4K, PAGE_4K)])


def test_type_exclusion_detects_overlap(env):
    k, sp, t, frame = env
    audit.check_type_exclusion(k)
    # forge a frame object over a page table's memory
    db = k.caps.db
    pt = sp.resolve(t[CapType.PT]).obj
    db.new_object(CapType.FRAME, pt.base, PAGE_4K, pt.parent)
    with pytest.raises(AuditError):
        audit.check_type_exclusion(k)


def test_authority_union():
    k = Kernel(64 * MiB)
    sp = k.space
    ram = sp.retype(k.untyped, CapType.RAM, MiB)[0]
    a, b = sp.retype(ram, CapType.FRAME, PAGE_4K, 2)
    sp.copy(a, rights=Rights.READ)
    auth = Authority(sp)
    assert auth.allows(0, 2 * PAGE_4K, False)
    assert auth.allows(0, 2 * PAGE_4K, True)
    assert not auth.allows(0, 3 * PAGE_4K, False)
