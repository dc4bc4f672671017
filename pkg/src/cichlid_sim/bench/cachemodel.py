"""Physically indexed, set-associative LRU cache."""

from __future__ import annotations

from ..machine import CacheGeometry


class CacheModel:
    def __init__(self, size: int, ways: int, line: int = 64):
        if line & (line - 1) or size % (ways * line):
            raise ValueError("cache geometry must divide evenly into power-of-two lines")
        self.size = size
        self.ways = ways
        self.line = line
        self.nsets = size // (ways * line)
        self.shift = line.bit_length() - 1
        self.sets: list[list[int]] = [[] for _ in range(self.nsets)]
        self.hits = 0
        self.misses = 0

    @classmethod
    def from_geometry(cls, geom: CacheGeometry) -> CacheModel:
        return cls(geom.size, geom.ways, geom.line)

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    def set_of(self, pa: int) -> int:
        return (pa >> self.shift) % self.nsets

    def access(self, pa: int) -> bool:
        tag = pa >> self.shift
        s = self.sets[tag % self.nsets]
        if tag in s:
            self.hits += 1
            if s[-1] != tag:
                s.remove(tag)
                s.append(tag)
            return True
        self.misses += 1
        s.append(tag)
        if len(s) > self.ways:
            del s[0]
        return False

    def reset_stats(self) -> None:
        self.hits = self.misses = 0

    def clear(self) -> None:
        for s in self.sets:
            s.clear()
        self.reset_stats()
