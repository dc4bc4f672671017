"""Benchmark reports and the shared measurement harness.

Columns ending in ``_ns`` hold wall-clock times; every other column is a
deterministic function of the seed and machine description.
"""

from __future__ import annotations

import csv
import io
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..alloc import MemoryService
from ..kernelapi import INVOCATIONS, Kernel
from ..machine import Machine
from ..physmem import FlushMode
from ..runtime.vspace import VSpace
from ..trace import Trace

TU_COLUMNS = ("tlb_hits", "tlb_misses", "walk_memory_reads", "full_flushes", "selective_flushes")


def is_wallclock(column: str) -> bool:
    return column.endswith("_ns")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class BenchReport:
    name: str
    config: dict[str, Any]
    rows: list[dict[str, Any]] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    traces: list[Trace] = field(default_factory=list, repr=False)

    def check(self, name: str, passed: bool, detail: str = "") -> bool:
        self.checks.append(Check(name, bool(passed), detail))
        return bool(passed)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def columns(self, wallclock: bool = True) -> list[str]:
        cols: list[str] = []
        for row in self.rows:
            for k in row:
                if k not in cols and (wallclock or not is_wallclock(k)):
                    cols.append(k)
        return cols

    def to_csv(self, wallclock: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns(wallclock), extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def strip_wallclock(text: str) -> str:
    """CSV text with the wall-clock columns removed, for determinism checks."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return ""
    keep = [i for i, c in enumerate(rows[0]) if not is_wallclock(c)]
    return "\n".join(",".join(r[i] for i in keep) for r in rows)


class Harness:
    """A fresh kernel, allocator and address space for one experiment."""

    def __init__(self, machine: Machine, flush_mode: FlushMode = FlushMode.DEFAULT,
                 zero_frames: bool = False):
        self.machine = machine
        self.trace = Trace(enabled=True)
        self.kernel = Kernel.from_machine(machine, trace=self.trace, flush_mode=flush_mode,
                                          zero_frames=zero_frames)
        self.mem = MemoryService.from_machine(self.kernel, machine)
        self.vspace = VSpace(self.kernel, self.mem)
        self.vspace.activate()
        self.proc = self.kernel.spawn(self.mem.space, 0, handler=self.vspace.handle_fault)

    @property
    def tu(self):
        return self.kernel.cores[0]

    @contextmanager
    def measure(self, run: str, report: BenchReport | None = None):
        """Collect invocation, upcall and MMU counter deltas for one run.

        On exit the invocation counters are re-derived from the trace
        records tagged with ``run`` and compared with the live counters.
        """
        trace, tu, k = self.trace, self.tu, self.kernel
        calls0 = Counter(trace.counts)
        tu0 = tu.counters.as_dict()
        up0 = k.upcalls
        first = len(trace.records)
        trace.run = run
        out: dict[str, Any] = {}
        t0 = time.perf_counter_ns()
        try:
            yield out
        finally:
            out["elapsed_ns"] = time.perf_counter_ns() - t0
            trace.run = None
            live = Counter(trace.counts)
            live.subtract(calls0)
            for name in INVOCATIONS:
                out[f"inv_{name}"] = live[name]
            out["invocations"] = sum(live[n] for n in INVOCATIONS)
            out["upcalls"] = k.upcalls - up0
            now = tu.counters.as_dict()
            for key in TU_COLUMNS:
                out[key] = now[key] - tu0[key]
            if report is not None:
                recs = Counter(r["name"] for r in trace.records[first:])
                same = all(recs[n] == live[n] for n in INVOCATIONS) and recs["upcall"] == out["upcalls"]
                report.check(f"trace-consistent[{run}]", same,
                             f"trace={dict(recs)} live={ {n: live[n] for n in INVOCATIONS} }")
