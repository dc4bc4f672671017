"""Invocation trace log.

Every capability invocation is counted by name.  When tracing is enabled
each invocation is additionally kept as a record; records serialize to JSON
lines with the fields ``seq``, ``run``, ``pid``, ``name``, ``args``,
``result`` and ``delta``.
"""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path
from typing import Any


class Trace:
    def __init__(self, enabled: bool = False):
        self.enabled = enabled
        self.records: list[dict[str, Any]] = []
        self.counts: Counter[str] = Counter()
        self.run: str | None = None
        self._seq = 0

    def record(self, name: str, pid: int, args: dict[str, Any], result: str,
               delta: dict[str, int] | None = None) -> None:
        self.counts[name] += 1
        self._seq += 1
        if self.enabled:
            self.records.append({
                "seq": self._seq,
                "run": self.run,
                "pid": pid,
                "name": name,
                "args": args,
                "result": result,
                "delta": delta or {},
            })

    def __len__(self) -> int:
        return self._seq

    def totals(self) -> Counter[str]:
        """Re-aggregate invocation counts from the stored records."""
        return Counter(r["name"] for r in self.records)

    def delta_totals(self) -> Counter[str]:
        out: Counter[str] = Counter()
        for r in self.records:
            out.update(r["delta"])
        return out

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True))
                fh.write("\n")

    @staticmethod
    def load(path: str | Path) -> list[dict[str, Any]]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
