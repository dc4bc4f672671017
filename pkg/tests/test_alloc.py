import pytest
from hypothesis import given, settings, strategies as st

from cichlid_sim import audit
from cichlid_sim.alloc import BuddyPool, ColorGeometry, MemAttr, MemKind, MemoryService
from cichlid_sim.capsys import CapType, Rights
from cichlid_sim.errors import (HasDescendants, InvalidAttr, InvalidSize, OutOfMemory,
                                StillMapped)
from cichlid_sim.kernelapi import Kernel
from cichlid_sim.machine import load_machine

KiB, MiB = 1 << 10, 1 << 20
PAGE = 4096


# -- buddy pool -------------------------------------------------------------------


def test_buddy_splits_lowest_first():
    pool = BuddyPool(0, MiB)
    assert [pool.alloc(PAGE) for _ in range(3)] == [0, PAGE, 2 * PAGE]
    assert pool.alloc(16 * KiB) == 16 * KiB
    assert pool.alloc(PAGE) == 3 * PAGE
    assert pool.free_bytes() == MiB - 32 * KiB


def test_buddy_coalesces():
    pool = BuddyPool(MiB, MiB)
    blocks = [pool.alloc(64 * KiB) for _ in range(16)]
    with pytest.raises(OutOfMemory):
        pool.alloc(PAGE)
    for b in reversed(blocks):
        pool.release(b)
    assert pool.alloc(MiB) == MiB


def test_buddy_alignment_and_filters():
    pool = BuddyPool(0, MiB)
    assert pool.alloc(PAGE, align=64 * KiB) == 0
    assert pool.alloc(PAGE, align=64 * KiB) == 64 * KiB
    # smallest free order wins: the 4K buddy at page 17 before splitting the 8K block at page 2
    assert pool.alloc(PAGE, accept=lambda s: s // PAGE % 7 == 3) == 17 * PAGE
    with pytest.raises(OutOfMemory):
        pool.alloc(PAGE, accept=lambda s: False)


@pytest.mark.parametrize("base, size", [(0, 3 * MiB), (MiB, 2 * MiB)])
def test_buddy_requires_aligned_power_of_two(base, size):
    with pytest.raises(InvalidSize):
        BuddyPool(base, size)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(12, 18), st.integers(0, 1000)), max_size=60))
def test_buddy_invariants(ops):
    size = MiB
    pool = BuddyPool(4 * MiB, size)
    live: dict[int, int] = {}
    for is_alloc, order, pick in ops:
        if is_alloc or not live:
            try:
                b = pool.alloc(1 << order)
            except OutOfMemory:
                # nothing of that order fits: confirm no aligned gap exists
                n = 1 << order
                taken = sorted((s, s + live[s]) for s in live)
                for start in range(4 * MiB, 5 * MiB, n):
                    assert any(lo < start + n and start < hi for lo, hi in taken)
                continue
            assert b % (1 << order) == 0 and 4 * MiB <= b and b + (1 << order) <= 5 * MiB
            assert all(b + (1 << order) <= s or s + n <= b for s, n in live.items())
            live[b] = 1 << order
        else:
            b = sorted(live)[pick % len(live)]
            pool.release(b)
            del live[b]
        assert pool.free_bytes() + sum(live.values()) == size
        assert pool.allocated_bytes() == sum(live.values())
    for b in list(live):
        pool.release(b)
    assert pool.free[pool.max_order] == [4 * MiB]


# -- colors ----------------------------------------------------------------------------


def test_color_geometry_of_presets():
    ivy = ColorGeometry.from_cache(load_machine("ivybridge").l3)
    opt = ColorGeometry.from_cache(load_machine("opteron6378").l3)
    assert (ivy.num_colors, opt.num_colors) == (320, 192)
    assert ivy.color(0) == 0 and ivy.color(319 * PAGE) == 319 and ivy.color(320 * PAGE) == 0
    assert ivy.colors_of(318 * PAGE, 4 * PAGE) == {318, 319, 0, 1}
    assert ivy.colors_of(0, 2 * MiB) == set(range(320))


def test_start_colors():
    g = ColorGeometry(cache_size=16 * PAGE, ways=1)     # 16 colors
    assert g.start_colors(frozenset({2, 3, 4, 5}), 2 * PAGE) == {2, 3, 4}
    assert g.start_colors(frozenset({14, 15, 0}), 2 * PAGE) == {14, 15}
    assert g.start_colors(frozenset(range(15)), 16 * PAGE) == frozenset()


# -- memory service ------------------------------------------------------------------


@pytest.fixture
def svc():
    k = Kernel(64 * MiB)
    return MemoryService(k, nodes=[(0, 32 * MiB), (32 * MiB, 32 * MiB)],
                         colors=ColorGeometry(cache_size=64 * PAGE, ways=1))


def test_strict_node_placement(svc):
    for node in (0, 1):
        h = svc.alloc(MemAttr(numa_node=node), 64 * KiB)
        base, size, t = svc.kernel.invoke_identify(svc.space, h)
        assert t is CapType.FRAME and size == 64 * KiB
        assert node * 32 * MiB <= base < (node + 1) * 32 * MiB
    with pytest.raises(InvalidAttr):
        svc.alloc(MemAttr(numa_node=2), PAGE)
    with pytest.raises(InvalidAttr):
        svc.alloc(MemAttr(kind=MemKind.PERSISTENT), PAGE)
    with pytest.raises(InvalidSize):
        svc.alloc(MemAttr(), 3 * PAGE)


def test_strict_never_falls_back_but_best_effort_does(svc):
    svc.alloc(MemAttr(numa_node=0), 32 * MiB, cap_type=CapType.RAM)
    with pytest.raises(OutOfMemory):
        svc.alloc(MemAttr(numa_node=0), PAGE)
    h = svc.alloc_best_effort(0, PAGE)
    assert svc.block_of(h).node == 1


def test_colored_frames_stay_in_their_colors(svc):
    colors = frozenset({5, 6, 7, 40})
    frames = [svc.alloc(MemAttr(color_set=colors), PAGE) for _ in range(20)]
    got = {svc.colors.color(svc.space.lookup(f).base) for f in frames}
    assert got <= colors and len(got) == 4
    with pytest.raises(InvalidAttr):
        svc.alloc(MemAttr(color_set=frozenset({64})), PAGE)
    two = svc.alloc(MemAttr(color_set=colors), 2 * PAGE)
    assert svc.colors.colors_of(svc.space.lookup(two).base, 2 * PAGE) <= colors


def test_alloc_frames_and_release(svc):
    before = svc.free_bytes()
    frames = svc.alloc_frames(MemAttr(), 64 * KiB)
    assert len(frames) == 16
    ram = next(h for h, b in svc.blocks.items() if b.frames == frames)
    svc.release(ram)
    assert svc.free_bytes() == before
    audit.check_partition(svc.kernel)


def test_release_refuses_mapped_or_derived(svc):
    k = svc.kernel
    pt = svc.alloc(MemAttr(), PAGE, cap_type=CapType.PT)
    f = svc.alloc(MemAttr(), PAGE)
    k.invoke_map(svc.space, pt, 0, [(f, Rights.RW)])
    with pytest.raises(StillMapped):
        svc.release(f)
    k.invoke_unmap(svc.space, pt, 0)
    svc.release(f)
    ram = svc.alloc(MemAttr(), 2 * PAGE, cap_type=CapType.RAM)
    svc.space.retype(ram, CapType.FRAME, PAGE)
    with pytest.raises(HasDescendants):
        svc.release(ram)
    with pytest.raises(InvalidAttr):
        svc.release(f)


def test_slots_grow_on_demand(svc):
    start = svc.space.free_slots()
    frames = svc.alloc_frames(MemAttr(), 2 * MiB)
    assert len(frames) == 512 > start
    assert len({svc.space.lookup(f).base for f in frames}) == 512


def test_from_machine_uses_the_nodes():
    m = load_machine("opteron6378")
    k = Kernel.from_machine(m)
    svc = MemoryService.from_machine(k, m)
    assert [p.size for p in svc.pools] == [1 << 30] * 8
    assert svc.colors.num_colors == 192
    h = svc.alloc(MemAttr(numa_node=5), PAGE)
    assert svc.block_of(h).base == 5 << 30
    assert m.nodes_by_distance(2)[:2] == [2, 3]
