"""Machine model files.

A machine file is an INI-style text file of ``key = value`` pairs::

    [machine]
    name = ivybridge
    cores = 1

    [tlb]
    l1.4k = 64/4          # entries/ways
    l2.4k = 512/4

    [memory]
    total = 4G
    node0 = 0 2G          # base size
    node1 = 2G 2G
    distance0 = 10 20
    distance1 = 20 10

    [cache]
    l3.size = 25M
    l3.ways = 20
    l3.line = 64

    [kernel]
    flush_threshold = 1
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import MachineFileError
from .physmem import PAGE_1G, PAGE_2M, PAGE_4K, TLBConfig

_SIZE_KEYS = {"4k": PAGE_4K, "2m": PAGE_2M, "1g": PAGE_1G}
_UNITS = {"": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30, "t": 1 << 40}


def parse_size(text: str) -> int:
    """'4G' -> 4 GiB, '0x1000' -> 4096, '64' -> 64."""
    text = text.strip().lower()
    if text.startswith("0x"):
        return int(text, 16)
    m = re.fullmatch(r"(\d+)\s*([kmgt]?)i?b?", text)
    if not m:
        raise MachineFileError(f"bad size {text!r}")
    return int(m.group(1)) * _UNITS[m.group(2)]


def format_size(n: int) -> str:
    for unit, scale in (("G", 1 << 30), ("M", 1 << 20), ("K", 1 << 10)):
        if n >= scale and n % scale == 0:
            return f"{n // scale}{unit}"
    return str(n)


@dataclass(frozen=True)
class CacheGeometry:
    size: int
    ways: int
    line: int = 64

    def __post_init__(self):
        if self.size <= 0 or self.ways <= 0 or self.line <= 0:
            raise MachineFileError("cache geometry must be positive")
        if self.size % (self.ways * self.line):
            raise MachineFileError("cache size must be a multiple of ways x line")

    @property
    def sets(self) -> int:
        return self.size // (self.ways * self.line)

    def num_colors(self, page_size: int = PAGE_4K) -> int:
        return max(1, self.size // (self.ways * page_size))


@dataclass(frozen=True)
class Machine:
    name: str
    tlb: TLBConfig
    total: int
    nodes: tuple[tuple[int, int], ...]
    distance: tuple[tuple[int, ...], ...]
    l3: CacheGeometry
    cores: int = 1
    flush_threshold: int = 1
    source: str | None = field(default=None, compare=False)

    def node_of(self, pa: int) -> int:
        for i, (base, size) in enumerate(self.nodes):
            if base <= pa < base + size:
                return i
        raise ValueError(f"{pa:#x} is not in any node")

    def nodes_by_distance(self, node: int) -> list[int]:
        row = self.distance[node]
        return sorted(range(len(self.nodes)), key=lambda n: (row[n], n))


def _geometry(value: str, key: str) -> tuple[int, int]:
    try:
        entries, ways = (int(x) for x in value.split("/"))
    except ValueError:
        raise MachineFileError(f"{key}: expected entries/ways, got {value!r}") from None
    return entries, ways


def parse_machine(text: str, source: str | None = None) -> Machine:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source or "<machine>")
    except configparser.Error as exc:
        raise MachineFileError(str(exc)) from None
    for section in ("machine", "tlb", "memory", "cache"):
        if not cp.has_section(section):
            raise MachineFileError(f"missing [{section}] section")

    l1: dict[int, tuple[int, int]] = {}
    l2: dict[int, tuple[int, int]] = {}
    for key, value in cp.items("tlb"):
        m = re.fullmatch(r"(l1|l2)\.(4k|2m|1g)", key)
        if not m:
            raise MachineFileError(f"unknown tlb key {key!r}")
        (l1 if m.group(1) == "l1" else l2)[_SIZE_KEYS[m.group(2)]] = _geometry(value, key)
    try:
        tlb = TLBConfig(l1=l1, l2=l2)
    except ValueError as exc:
        raise MachineFileError(str(exc)) from None

    mem = cp["memory"]
    total = parse_size(mem.get("total", "0"))
    nodes = []
    i = 0
    while f"node{i}" in mem:
        parts = mem[f"node{i}"].split()
        if len(parts) != 2:
            raise MachineFileError(f"node{i}: expected 'base size'")
        nodes.append((parse_size(parts[0]), parse_size(parts[1])))
        i += 1
    if not nodes:
        nodes = [(0, total)]
    distance = []
    for i in range(len(nodes)):
        row = mem.get(f"distance{i}")
        if row is None:
            distance.append(tuple(10 if j == i else 20 for j in range(len(nodes))))
        else:
            distance.append(tuple(int(x) for x in row.split()))
            if len(distance[-1]) != len(nodes):
                raise MachineFileError(f"distance{i} must have {len(nodes)} entries")

    end = 0
    for base, size in sorted(nodes):
        if base < end:
            raise MachineFileError("node spans overlap")
        if size & (size - 1) or base % size:
            raise MachineFileError(f"node span {base:#x}+{size:#x} must be a naturally aligned power of two")
        end = base + size
    if end > total:
        raise MachineFileError("node spans exceed total memory")

    cache = cp["cache"]
    l3 = CacheGeometry(parse_size(cache.get("l3.size", "0")), int(cache.get("l3.ways", "0")),
                       parse_size(cache.get("l3.line", "64")))
    kernel = cp["kernel"] if cp.has_section("kernel") else {}
    return Machine(
        name=cp["machine"].get("name", "unnamed"),
        tlb=tlb,
        total=total,
        nodes=tuple(nodes),
        distance=tuple(distance),
        l3=l3,
        cores=int(cp["machine"].get("cores", "1")),
        flush_threshold=int(kernel.get("flush_threshold", "1")),
        source=source,
    )


def preset_names() -> list[str]:
    return sorted(p.name[:-len(".machine")] for p in resources.files(__package__).joinpath("machines").iterdir()
                  if p.name.endswith(".machine"))


def load_machine(spec: str | Path = "ivybridge") -> Machine:
    """Load a machine file by path, or a bundled preset by name."""
    path = Path(spec)
    if path.is_file():
        return parse_machine(path.read_text(encoding="utf-8"), str(path))
    name = str(spec)
    if name.endswith(".machine"):
        name = name[:-len(".machine")]
    res = resources.files(__package__).joinpath("machines").joinpath(f"{Path(name).name}.machine")
    if not res.is_file():
        raise MachineFileError(f"no machine file or preset named {spec!r}")
    return parse_machine(res.read_text(encoding="utf-8"), res.name)
