"""The benchmark experiments.

Every experiment takes a :class:`Machine`, a seed and keyword parameters
and returns a :class:`BenchReport` whose ``checks`` are the embedded
assertions.  Parameters are listed in ``EXPERIMENTS`` with their defaults.
"""

from __future__ import annotations

import dataclasses
import time
from typing import Any, Callable

from ..alloc import MemAttr
from ..capsys import Rights
from ..machine import Machine, format_size
from ..physmem import ENTRIES, PAGE_1G, PAGE_2M, PAGE_4K, Access, FlushMode
from ..runtime.pager import Pager
from ..runtime.store import BackingStore
from ..runtime.vspace import MemObj, VSpace
from .cachemodel import CacheModel
from .report import BenchReport, Harness
from .rng import Rng

MiB = 1 << 20


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


# -- appel-li ------------------------------------------------------------------


class _Trapper:
    """Fault handler for the trap benchmarks.

    A trapped write is either resolved by unprotecting its page (``unprot``)
    or recorded and skipped, the way a handler advances past an instruction.
    """

    def __init__(self, vs: VSpace, region, unprot: bool):
        self.vs = vs
        self.region = region
        self.unprot = unprot
        self.skip = False
        self.pending: list[int] = []

    def __call__(self, fault) -> None:
        page = self.region.page_of(fault.va)
        if self.unprot:
            self.vs.protect_pages(self.region, range(page, page + 1), Rights.RW)
        else:
            self.pending.append(page)
            self.skip = True

    def write(self, proc, va: int, value: int) -> None:
        tu = proc.tu

        def op():
            if self.skip:
                self.skip = False
                return None
            return tu.access(va, Access.WRITE, 8, value)

        proc.kernel.run(proc, op)


def appel_li(machine: Machine, seed: int, pages: int = 64,
             flush_modes: tuple[str, ...] = ("full", "selective", "default")) -> BenchReport:
    report = BenchReport("appel-li", {"pages": pages, "flush_modes": ",".join(flush_modes),
                                      "machine": machine.name, "seed": seed})
    threshold = machine.flush_threshold
    for mode_name in flush_modes:
        mode = FlushMode(mode_name)
        h = Harness(machine, flush_mode=mode)
        vs, proc = h.vspace, h.proc
        region = vs.map_region(MemObj.allocate(h.mem, pages * PAGE_4K))
        tables = sum(1 for _ in vs._runs(region))

        def row(variant, m, ops):
            r = {"variant": variant, "flush_mode": mode_name, "pages": pages, "ops": ops}
            r.update({k: v for k, v in m.items() if k != "elapsed_ns"})
            r["per_op_ns"] = m["elapsed_ns"] // max(ops, 1)
            report.rows.append(r)
            return r

        # trap-only: one write to a protected page, skipped by the handler
        vs.protect(region, Rights.READ)
        trap = _Trapper(vs, region, unprot=False)
        region.fault_handler = trap
        with h.measure(f"{mode_name}/trap-only", report) as m:
            trap.write(proc, region.base, 1)
        r = row("trap-only", m, 1)
        report.check(f"trap-only upcalls=1 maps=0 [{mode_name}]",
                     r["upcalls"] == 1 and r["inv_map"] == 0, f"{r['upcalls']} upcalls, {r['inv_map']} maps")
        vs.protect(region, Rights.RW)

        # prot1-trap-unprot: protect one page, trap on it, unprotect it
        trap = _Trapper(vs, region, unprot=True)
        region.fault_handler = trap
        with h.measure(f"{mode_name}/prot1", report) as m:
            for i in range(pages):
                vs.protect_pages(region, range(i, i + 1), Rights.READ)
                trap.write(proc, region.page_va(i), i)
        r = row("prot1-trap-unprot", m, pages)
        report.check(f"prot1 modify_flags=2N [{mode_name}]", r["inv_modify_flags"] == 2 * pages,
                     str(r["inv_modify_flags"]))
        single_selective = mode is FlushMode.SELECTIVE or (mode is FlushMode.DEFAULT and threshold >= 1)
        want = (0, 2 * pages) if single_selective else (2 * pages, 0)
        report.check(f"prot1 flush counters [{mode_name}]",
                     (r["full_flushes"], r["selective_flushes"]) == want,
                     f"full={r['full_flushes']} selective={r['selective_flushes']} want={want}")

        # protN-trap-unprot, batched and unbatched
        for variant, batch in (("protN-trap-unprot", vs.batch), ("protN-unbatched", 1)):
            saved, vs.batch = vs.batch, batch
            trap = _Trapper(vs, region, unprot=False)
            region.fault_handler = trap
            with h.measure(f"{mode_name}/{variant}/protect", report) as mp:
                vs.protect(region, Rights.READ)
            with h.measure(f"{mode_name}/{variant}", report) as m:
                for i in range(pages):
                    trap.write(proc, region.page_va(i), i)
                vs.protect(region, Rights.RW)
                for i in trap.pending:
                    trap.write(proc, region.page_va(i), i)
            vs.batch = saved
            for k in m:
                if k != "elapsed_ns":
                    m[k] += mp[k]
            m["elapsed_ns"] += mp["elapsed_ns"]
            r = row(variant, m, pages)
            r["protect_calls"] = mp["inv_modify_flags"]
            expect = tables if batch > 1 else pages
            report.check(f"{variant} protect calls={expect} [{mode_name}]", r["protect_calls"] == expect,
                         str(r["protect_calls"]))
            report.check(f"{variant} upcalls=N [{mode_name}]", r["upcalls"] == pages, str(r["upcalls"]))
            if batch > 1:
                report.check(f"protN modify_flags=2 [{mode_name}]", r["inv_modify_flags"] == 2 * tables,
                             str(r["inv_modify_flags"]))
                if mode is FlushMode.DEFAULT:
                    full = pages > threshold
                    report.check(f"protN default flush policy [{mode_name}]",
                                 (r["full_flushes"] > 0) == full and (r["selective_flushes"] > 0) != full,
                                 f"full={r['full_flushes']} selective={r['selective_flushes']}")
        region.fault_handler = None
        report.traces.append(h.trace)
    return report


# -- memops --------------------------------------------------------------------


def memops(machine: Machine, seed: int, page_sizes: tuple[int, ...] = (PAGE_4K, PAGE_2M, PAGE_1G),
           buffers: tuple[int, ...] = (PAGE_4K, 64 << 10, MiB, 2 * MiB, 8 * MiB, 32 * MiB, 64 * MiB,
                                       256 * MiB, PAGE_1G),
           max_pages: int = 16384, reps: int = 3) -> BenchReport:
    report = BenchReport("memops", {"page_sizes": ",".join(format_size(p) for p in page_sizes),
                                    "buffers": ",".join(format_size(b) for b in buffers),
                                    "max_pages": max_pages, "reps": reps,
                                    "machine": machine.name, "seed": seed})
    h = Harness(machine)
    vs, mem = h.vspace, h.mem
    for page in page_sizes:
        for buf in buffers:
            npages = buf // page
            if buf < page or buf % page or npages > max_pages or buf > machine.total // 2:
                continue
            obj = MemObj.allocate(mem, buf, page)
            times = {"map": [], "protect": [], "unmap": []}
            row: dict[str, Any] = {"page_size": page, "buffer_bytes": buf, "pages": npages}
            for rep in range(reps):
                t0 = time.perf_counter_ns()
                tables0 = vs.table_maps
                with h.measure(f"{format_size(page)}/{format_size(buf)}/map/{rep}", report) as m:
                    region = vs.map_region(obj, page_size=page)
                times["map"].append(time.perf_counter_ns() - t0)
                leaf_maps = m["inv_map"] - (vs.table_maps - tables0)
                t0 = time.perf_counter_ns()
                with h.measure(f"{format_size(page)}/{format_size(buf)}/protect/{rep}", report) as p:
                    vs.protect(region, Rights.READ)
                times["protect"].append(time.perf_counter_ns() - t0)
                free0 = mem.free_bytes()
                t0 = time.perf_counter_ns()
                with h.measure(f"{format_size(page)}/{format_size(buf)}/unmap/{rep}", report) as u:
                    vs.unmap(region)
                times["unmap"].append(time.perf_counter_ns() - t0)
                if rep == 0:
                    row.update(leaf_maps=leaf_maps, protect_calls=p["inv_modify_flags"],
                               unmap_calls=u["inv_unmap"])
                    report.check(f"unmap keeps allocator state [{format_size(page)}/{format_size(buf)}]",
                                 mem.free_bytes() == free0)
            old = vs.batch
            vs.batch = 1
            tables0 = vs.table_maps
            with h.measure(f"{format_size(page)}/{format_size(buf)}/map-unbatched", report) as m:
                region = vs.map_region(obj, page_size=page)
            vs.batch = old
            row["leaf_maps_unbatched"] = m["inv_map"] - (vs.table_maps - tables0)
            vs.unmap(region)
            report.check(f"batch factor [{format_size(page)}/{format_size(buf)}]",
                         row["leaf_maps_unbatched"] == npages and row["leaf_maps"] == -(-npages // ENTRIES),
                         f"{row['leaf_maps']} batched vs {row['leaf_maps_unbatched']} unbatched")
            for op, ts in times.items():
                row[f"{op}_per_page_ns"] = min(ts) // npages
            report.rows.append(row)
            obj.release(mem)
    # per-page map cost should be flat once buffers exceed 2 MiB
    for page in page_sizes:
        costs = [r["map_per_page_ns"] for r in report.rows
                 if r["page_size"] == page and r["buffer_bytes"] > 2 * MiB]
        if page == PAGE_4K and len(costs) >= 2:
            report.check("4K map cost flat beyond 2 MiB (max/min <= 3)", max(costs) <= 3 * min(costs),
                         f"{min(costs)}..{max(costs)} ns/page")
    report.traces.append(h.trace)
    return report


# -- gups ----------------------------------------------------------------------


def gups(machine: Machine, seed: int,
         table_bytes: tuple[int, ...] = (MiB, 2 * MiB, 4 * MiB, 16 * MiB, 64 * MiB, 128 * MiB),
         page_sizes: tuple[int, ...] = (PAGE_4K, PAGE_2M, PAGE_1G),
         updates: int = 1_000_000, rng: str = "xorshift") -> BenchReport:
    report = BenchReport("gups", {"table_bytes": ",".join(format_size(t) for t in table_bytes),
                                  "page_sizes": ",".join(format_size(p) for p in page_sizes),
                                  "updates": updates, "rng": rng,
                                  "machine": machine.name, "seed": seed})
    h = Harness(machine)
    vs, mem, tu = h.vspace, h.mem, h.tu
    for page in page_sizes:
        for tbytes in table_bytes:
            length = max(tbytes, page)
            if length > machine.total // 2:
                continue
            obj = MemObj.allocate(mem, length, page)
            region = vs.map_region(obj, page_size=page)
            tu.flush_full()
            mask = tbytes // 8 - 1
            base = region.base
            rmw = tu.rmw_xor
            gen = Rng(seed, rng)
            faults = 0
            with h.measure(f"{format_size(page)}/{format_size(tbytes)}", report) as m:
                for r in gen.stream(updates):
                    if rmw(base + ((r & mask) << 3), r) is not None:
                        faults += 1
            accesses = m["tlb_hits"] + m["tlb_misses"]
            row = {"page_size": page, "table_bytes": tbytes, "updates": updates,
                   "faults": faults, "tlb_hits": m["tlb_hits"], "tlb_misses": m["tlb_misses"],
                   "walk_reads": m["walk_memory_reads"],
                   "miss_ratio": _ratio(m["tlb_misses"], accesses),
                   "walk_reads_per_miss": _ratio(m["walk_memory_reads"], m["tlb_misses"]),
                   "walk_reads_per_update": _ratio(m["walk_memory_reads"], updates),
                   "gups_proxy": _ratio(updates, accesses + m["walk_memory_reads"]),
                   "elapsed_ns": m["elapsed_ns"]}
            report.rows.append(row)
            vs.unmap(region)
            obj.release(mem)
    rows = {(r["page_size"], r["table_bytes"]): r for r in report.rows}
    depth = {PAGE_4K: 4, PAGE_2M: 3, PAGE_1G: 2}
    for (page, tbytes), r in rows.items():
        if r["tlb_misses"]:
            report.check(f"walk reads per miss = {depth[page]} [{format_size(page)}/{format_size(tbytes)}]",
                         r["walk_reads"] == depth[page] * r["tlb_misses"], f"{r['walk_reads_per_miss']:.3f}")
        report.check(f"no faults [{format_size(page)}/{format_size(tbytes)}]", r["faults"] == 0)
    if (PAGE_4K, MiB) in rows:
        r = rows[PAGE_4K, MiB]
        report.check("4K/1M miss ratio < 1%", r["miss_ratio"] < 0.01, f"{r['miss_ratio']:.4%}")
    if (PAGE_4K, 16 * MiB) in rows:
        r = rows[PAGE_4K, 16 * MiB]
        report.check("4K/16M miss ratio > 50%", r["miss_ratio"] > 0.5, f"{r['miss_ratio']:.4%}")
    for tbytes in sorted({t for _, t in rows if t >= 128 * MiB}):
        ratios = [rows[p, tbytes]["miss_ratio"] for p in (PAGE_1G, PAGE_2M, PAGE_4K) if (p, tbytes) in rows]
        report.check(f"miss ratio 1G <= 2M <= 4K [{format_size(tbytes)}]",
                     all(a <= b for a, b in zip(ratios, ratios[1:])), str([f"{x:.4f}" for x in ratios]))
    report.traces.append(h.trace)
    return report


# -- gc-tracking ---------------------------------------------------------------


def gc_tracking(machine: Machine, seed: int, heap_pages: int = 4096, write_fraction: float = 0.1,
                rounds: int = 50) -> BenchReport:
    report = BenchReport("gc-tracking", {"heap_pages": heap_pages, "write_fraction": write_fraction,
                                         "rounds": rounds, "machine": machine.name, "seed": seed})
    h = Harness(machine)
    vs, mem, proc = h.vspace, h.mem, h.proc
    size = heap_pages * PAGE_4K
    heap_a = vs.map_region(MemObj.allocate(mem, size))
    heap_b = vs.map_region(MemObj.allocate(mem, size))
    tables = sum(1 for _ in vs._runs(heap_b))
    seen_a: set[int] = set()

    def on_write(fault):
        page = heap_a.page_of(fault.va)
        seen_a.add(page)
        vs.protect_pages(heap_a, range(page, page + 1), Rights.RW)

    heap_a.fault_handler = on_write
    vs.clear_status(heap_b)
    vs.read_status_bits(heap_b)
    gen = Rng(seed)
    writes = max(1, round(write_fraction * heap_pages))
    ok_a = ok_b = ok_up = ok_clear = ok_b_up = True
    for rnd in range(rounds):
        log = [gen.below(heap_pages) for _ in range(writes)]
        offsets = [gen.below(PAGE_4K // 8) * 8 for _ in range(writes)]
        truth = set(log)

        vs.protect(heap_a, Rights.READ)
        seen_a.clear()
        with h.measure(f"A/{rnd}", report) as ma:
            for page, off in zip(log, offsets):
                proc.write(heap_a.page_va(page) + off, rnd + 1)
        detected_a = set(seen_a)

        with h.measure(f"B/{rnd}", report) as mb:
            for page, off in zip(log, offsets):
                proc.write(heap_b.page_va(page) + off, rnd + 1)
            bits = vs.read_status_bits(heap_b)
            detected_b = set(bits.dirty_pages())
            vs.clear_status(heap_b)

        for tracker, m, detected in (("A", ma, detected_a), ("B", mb, detected_b)):
            report.rows.append({"round": rnd, "tracker": tracker, "writes": writes,
                                "distinct": len(truth), "detected": len(detected),
                                "match": int(detected == truth), "upcalls": m["upcalls"],
                                "invocations": m["invocations"],
                                "modify_flags": m["inv_modify_flags"],
                                "clear_dirty_bits": m["inv_clear_dirty_bits"],
                                "tables_scanned": tables if tracker == "B" else 0,
                                "elapsed_ns": m["elapsed_ns"]})
        ok_a &= detected_a == truth
        ok_b &= detected_b == truth
        ok_up &= ma["upcalls"] == len(truth)
        ok_b_up &= mb["upcalls"] == 0
        ok_clear &= mb["inv_clear_dirty_bits"] == tables
    report.check("tracker A dirty set equals mutator log", ok_a)
    report.check("tracker B dirty set equals mutator log", ok_b)
    report.check("tracker A upcalls = distinct pages written", ok_up)
    report.check("tracker B performs no upcalls", ok_b_up)
    report.check(f"tracker B clears once per table per round ({tables})", ok_clear)
    report.traces.append(h.trace)
    return report


# -- coloring ------------------------------------------------------------------


def _colored(mem, size: int, attrs: MemAttr, block: int) -> MemObj:
    frames = []
    for _ in range(size // block):
        frames.extend((f, PAGE_4K) for f in mem.alloc_frames(attrs, block, PAGE_4K))
    return MemObj(frames)


def coloring(machine: Machine, seed: int, small_ws: int = 16 * MiB, large_ws: int = 64 * MiB,
             small_colors: int | None = None, accesses: int = 200_000, warmup: int = 400_000,
             block: int = 64 << 10) -> BenchReport:
    geom = machine.l3
    ncolors = geom.num_colors(PAGE_4K)
    if small_colors is None:
        small_colors = ncolors * 3 // 4
    report = BenchReport("coloring", {"small_ws": small_ws, "large_ws": large_ws, "colors": ncolors,
                                      "small_colors": small_colors, "accesses": accesses, "warmup": warmup,
                                      "block": block, "machine": machine.name, "seed": seed})
    h = Harness(machine)
    vs, mem, tu = h.vspace, h.mem, h.tu
    configs = {
        "isolation": (MemAttr(), None),
        "shared": (MemAttr(), MemAttr()),
        "partitioned": (MemAttr(color_set=frozenset(range(small_colors))),
                        MemAttr(color_set=frozenset(range(small_colors, ncolors)))),
    }
    results = {}
    for name, (small_attr, large_attr) in configs.items():
        streams = []
        for ws, attr in ((small_ws, small_attr), (large_ws, large_attr)):
            if attr is None:
                continue
            if attr.color_set is None:
                obj = MemObj.allocate(mem, ws, PAGE_4K, attr)
            else:
                obj = _colored(mem, ws, attr, block)
            region = vs.map_region(obj)
            pas = [tu.translate(region.page_va(i)) for i in range(region.npages)]
            streams.append((obj, region, pas))
        cache = CacheModel.from_geometry(geom)
        line = geom.line
        per_page = PAGE_4K // line
        # one sequential pass over the small working set, then an unmeasured
        # interleaved phase so the measured phase starts from steady state
        for pa in streams[0][2]:
            for k in range(per_page):
                cache.access(pa + k * line)
        gen = Rng(seed)
        tables = [(s[2], len(s[2]) * per_page) for s in streams]
        access = cache.access
        below = gen.below
        hits = [0] * len(streams)
        for phase, count in (("warm", warmup), ("measure", accesses)):
            if phase == "measure":
                cache.reset_stats()
            for _ in range(count):
                for i, (pas, nlines) in enumerate(tables):
                    ln = below(nlines)
                    if access(pas[ln // per_page] + (ln % per_page) * line) and phase == "measure":
                        hits[i] += 1
        color_sets = [{(pa // PAGE_4K) % ncolors for pa in s[2]} for s in streams]
        overlap = len(color_sets[0] & color_sets[1]) if len(color_sets) > 1 else 0
        row = {"config": name, "small_hit_ratio": hits[0] / accesses,
               "small_miss_ratio": 1 - hits[0] / accesses,
               "large_hit_ratio": hits[1] / accesses if len(streams) > 1 else "",
               "large_miss_ratio": 1 - hits[1] / accesses if len(streams) > 1 else "",
               "shared_colors": overlap, "lookups": cache.lookups,
               "cache_hits": cache.hits, "cache_misses": cache.misses}
        report.rows.append(row)
        results[name] = row
        report.check(f"hits+misses = lookups [{name}]", cache.hits + cache.misses == cache.lookups)
        for obj, region, _ in streams:
            vs.unmap(region)
            obj.release(mem)
    iso = results["isolation"]["small_hit_ratio"]
    part = results["partitioned"]["small_hit_ratio"]
    shared = results["shared"]["small_hit_ratio"]
    report.check("partitioned >= 90% of isolation", part >= 0.9 * iso, f"{part:.4f} vs {iso:.4f}")
    report.check("shared < partitioned", shared < part, f"{shared:.4f} vs {part:.4f}")
    report.check("partition colors disjoint", results["partitioned"]["shared_colors"] == 0)
    report.traces.append(h.trace)
    return report


# -- pager ---------------------------------------------------------------------


def pager(machine: Machine, seed: int, region_pages: int = 64, resident: tuple[int, ...] = (4, 8, 16, 32),
          patterns: tuple[str, ...] = ("sequential", "random", "readonly"),
          accesses: int = 512) -> BenchReport:
    report = BenchReport("pager", {"region_pages": region_pages,
                                   "resident": ",".join(map(str, resident)),
                                   "patterns": ",".join(patterns), "accesses": accesses,
                                   "machine": machine.name, "seed": seed})
    h = Harness(machine)
    vs, mem, proc = h.vspace, h.mem, h.proc
    for pattern in patterns:
        for frames in resident:
            obj = MemObj.allocate(mem, region_pages * PAGE_4K)
            region = vs.map_region(obj)
            store = BackingStore(PAGE_4K)
            pg = Pager(vs, region, frames, store)
            gen = Rng(seed)
            expect: dict[int, int] = {}
            bound_ok = True
            with h.measure(f"{pattern}/{frames}", report) as m:
                if pattern == "sequential":
                    ops = [(i, True) for i in range(region_pages)]
                else:
                    ops = [(gen.below(region_pages), pattern == "random" and gen.chance(0.5))
                           for _ in range(accesses)]
                for page, write in ops:
                    va = region.page_va(page) + (page * 8) % PAGE_4K
                    if write:
                        value = gen.next()
                        proc.write(va, value)
                        expect[page] = value
                    else:
                        got = proc.read(va)
                        if got != expect.get(page, 0):
                            bound_ok = False
                    bound_ok &= pg.resident <= frames
            st = dataclasses.replace(pg.stats)
            row = {"pattern": pattern, "resident": frames, "region_pages": region_pages,
                   "touched": len(pg.touched), "faults": st.faults, "evictions": st.evictions,
                   "dirty_evictions": st.dirty_evictions, "store_writes": st.store_writes,
                   "store_loads": st.store_loads, "zero_fills": st.zero_fills,
                   "max_resident": pg.max_resident, "upcalls": m["upcalls"],
                   "invocations": m["invocations"], "elapsed_ns": m["elapsed_ns"]}
            # read everything back through the pager
            intact = all(proc.read(region.page_va(p) + (p * 8) % PAGE_4K) == v for p, v in expect.items())
            row["round_trip"] = int(intact and bound_ok)
            report.rows.append(row)
            tag = f"[{pattern}/{frames}]"
            report.check(f"residency bound {tag}", pg.max_resident <= frames and bound_ok)
            report.check(f"contents round-trip {tag}", intact)
            report.check(f"clean evictions write nothing {tag}", st.store_writes == st.dirty_evictions)
            if pattern == "sequential":
                want = max(0, row["touched"] - frames)
                report.check(f"sequential evictions = touched - resident {tag}", st.evictions == want,
                             f"{st.evictions} vs {want}")
            if pattern == "readonly":
                report.check(f"read-only makes no store writes {tag}", st.store_writes == 0)
            pg.detach()
            vs.unmap(region)
            obj.release(mem)
    seq = sorted((r["resident"], r["faults"]) for r in report.rows if r["pattern"] == "sequential")
    if len(seq) > 1:
        report.check("sequential faults non-increasing with more frames",
                     all(b[1] <= a[1] for a, b in zip(seq, seq[1:])), str(seq))
    report.traces.append(h.trace)
    return report


Experiment = Callable[..., BenchReport]

EXPERIMENTS: dict[str, Experiment] = {
    "appel-li": appel_li,
    "memops": memops,
    "gups": gups,
    "gc-tracking": gc_tracking,
    "coloring": coloring,
    "pager": pager,
}

__all__ = ["EXPERIMENTS", "appel_li", "memops", "gups", "gc_tracking", "coloring", "pager"]
