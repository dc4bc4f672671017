"""Deterministic 64-bit generators for the benchmarks."""

from __future__ import annotations

MASK = (1 << 64) - 1


class Rng:
    """xorshift64* by default; ``kind="lcg"`` selects a 64-bit LCG instead."""

    def __init__(self, seed: int, kind: str = "xorshift"):
        if kind not in ("xorshift", "lcg"):
            raise ValueError(f"unknown generator {kind!r}")
        self.kind = kind
        # mix the seed so small seeds do not give correlated early outputs
        s = (seed * 0x9E3779B97F4A7C15 + 0x632BE59BD9B4E019) & MASK
        self.state = s or 0x2545F4914F6CDD1D

    def next(self) -> int:
        if self.kind == "lcg":
            self.state = (self.state * 6364136223846793005 + 1442695040888963407) & MASK
            return self.state
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK

    def below(self, n: int) -> int:
        """Uniform-ish integer in ``[0, n)`` from the high bits."""
        return (self.next() >> 32) * n >> 32

    def chance(self, p: float) -> bool:
        return self.next() < p * (1 << 64)

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, n: int, k: int) -> list[int]:
        """``k`` distinct values from ``range(n)``, in drawing order."""
        if k > n:
            raise ValueError("sample larger than population")
        pool = list(range(n))
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def stream(self, count: int):
        nxt = self.next
        for _ in range(count):
            yield nxt()
