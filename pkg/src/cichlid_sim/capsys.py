"""Capabilities, the retype lattice, the derivation database and capability spaces.

Every physical byte the simulator knows about is named by exactly one
chain of capabilities rooted at the boot ``Untyped`` region.  A
:class:`CapObject` is one node of the derivation tree (a typed physical
range); the capabilities a process holds are :class:`Capability` instances
pointing at objects.  Copies of a capability share one object, so
"descendants of any copy" is simply "children of the object".

Handles are 32-bit integers that encode a path of CNode slot indices, most
significant byte first.  Slot 0 of every CNode is reserved, so a zero byte
terminates the path; the layout is described in ``docs/handles.md``.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Iterator, Protocol

from sortedcontainers import SortedKeyList

from .errors import (DisallowedTransition, HasConflictingDescendants, InvalidSize,
                     LookupFailed, NotEmpty, RightsExceeded, SimError, SlotExhausted)
from .trace import Trace

PAGE_SIZE = 4096
CNODE_SLOTS = 256
MAX_DEPTH = 4
MIN_PHYS = 1 << 20


class CapType(enum.Enum):
    UNTYPED = 0
    RAM = 1
    CNODE = 2
    FRAME = 3
    PML4 = 4
    PDPT = 5
    PD = 6
    PT = 7

    @property
    def is_table(self) -> bool:
        return self in TABLE_TYPES


TABLE_TYPES = frozenset({CapType.PML4, CapType.PDPT, CapType.PD, CapType.PT})

RETYPE_EDGES: dict[CapType, frozenset[CapType]] = {
    CapType.UNTYPED: frozenset({CapType.UNTYPED, CapType.RAM}),
    CapType.RAM: frozenset({CapType.CNODE, CapType.FRAME, *TABLE_TYPES}),
}


class Rights(enum.Flag):
    NONE = 0
    READ = 1
    WRITE = 2
    RW = READ | WRITE


def is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


class CNodeSlots:
    """Backing store of one CNode: 256 slots, slot 0 reserved."""

    __slots__ = ("slots", "free", "hint")

    def __init__(self) -> None:
        self.slots: list[Capability | None] = [None] * CNODE_SLOTS
        self.free = CNODE_SLOTS - 1
        self.hint = 1

    def occupied(self) -> int:
        return CNODE_SLOTS - 1 - self.free


class CapObject:
    """A typed physical range; one node of the derivation tree."""

    __slots__ = ("cap_type", "base", "size", "parent", "children", "copies",
                 "cnode", "serial")

    def __init__(self, cap_type: CapType, base: int, size: int, serial: int):
        self.cap_type = cap_type
        self.base = base
        self.size = size
        self.serial = serial
        self.parent: CapObject | None = None
        self.children: SortedKeyList = SortedKeyList(key=_base_key)
        self.copies: list[Capability] = []
        self.cnode: CNodeSlots | None = CNodeSlots() if cap_type is CapType.CNODE else None

    @property
    def end(self) -> int:
        return self.base + self.size

    def __repr__(self) -> str:
        return f"<{self.cap_type.name} {self.base:#x}+{self.size:#x}>"


def _base_key(obj: CapObject) -> int:
    return obj.base


def _index_key(obj: CapObject) -> tuple[int, int, int, int]:
    return (obj.base, obj.cap_type.value, obj.size, obj.serial)


class Capability:
    """One capability instance held in a CNode slot."""

    __slots__ = ("obj", "rights", "mapping", "location")

    def __init__(self, obj: CapObject, rights: Rights):
        self.obj = obj
        self.rights = rights
        self.mapping = None  # kernelapi.MappingRecord when installed in a page table
        self.location: tuple[CNodeSlots, int] | None = None

    @property
    def cap_type(self) -> CapType:
        return self.obj.cap_type

    @property
    def base(self) -> int:
        return self.obj.base

    @property
    def size(self) -> int:
        return self.obj.size

    def __repr__(self) -> str:
        return f"<cap {self.obj!r} {self.rights.name}{' mapped' if self.mapping else ''}>"


@dataclass(frozen=True)
class CapView:
    cap_type: CapType
    base: int
    size: int
    rights: Rights
    mapped: bool
    copies: int
    children: int


class CapObserver(Protocol):
    def object_created(self, obj: CapObject) -> None: ...
    def capability_removed(self, cap: Capability) -> None: ...
    def object_destroyed(self, obj: CapObject) -> None: ...


class DerivationDB:
    """All live capability objects, as a tree plus an ordered index.

    The index is ordered by (base, type, size) so that everything derived
    from a range can be found by a range query on the base address.
    """

    def __init__(self) -> None:
        self.roots: list[CapObject] = []
        self._index: SortedKeyList = SortedKeyList(key=_index_key)
        self._serial = 0
        self._caps = 0

    def __len__(self) -> int:
        return self._caps

    def new_object(self, cap_type: CapType, base: int, size: int,
                   parent: CapObject | None) -> CapObject:
        self._serial += 1
        obj = CapObject(cap_type, base, size, self._serial)
        obj.parent = parent
        if parent is None:
            self.roots.append(obj)
        else:
            parent.children.add(obj)
        self._index.add(obj)
        return obj

    def drop_object(self, obj: CapObject) -> None:
        """Unlink an object whose last copy is gone; children move to its parent."""
        orphans = list(obj.children)
        obj.children.clear()
        if obj.parent is None:
            self.roots.remove(obj)
            self.roots.extend(orphans)
        else:
            obj.parent.children.remove(obj)
            obj.parent.children.update(orphans)
        for child in orphans:
            child.parent = obj.parent
        self._index.remove(obj)
        obj.parent = None

    def objects(self) -> Iterator[CapObject]:
        return iter(self._index)

    def within(self, base: int, size: int) -> list[CapObject]:
        """Objects whose base lies in ``[base, base + size)``."""
        lo = self._index.bisect_key_left((base, -1, -1, -1))
        hi = self._index.bisect_key_left((base + size, -1, -1, -1))
        return list(self._index[lo:hi])

    def capabilities(self) -> Iterator[Capability]:
        for obj in self._index:
            yield from obj.copies

    def descendants(self, obj: CapObject) -> Iterator[CapObject]:
        stack = list(obj.children)
        while stack:
            o = stack.pop()
            yield o
            stack.extend(o.children)


def encode_handle(path: tuple[int, ...] | list[int]) -> int:
    handle = 0
    for depth, index in enumerate(path):
        handle |= index << (24 - 8 * depth)
    return handle


def decode_handle(handle: int) -> tuple[int, ...]:
    if not isinstance(handle, int) or not 0 < handle < 1 << 32:
        raise LookupFailed(f"invalid handle {handle!r}")
    path: list[int] = []
    for depth in range(MAX_DEPTH):
        index = (handle >> (24 - 8 * depth)) & 0xFF
        if index == 0:
            if handle & ((1 << (24 - 8 * depth + 8)) - 1):
                raise LookupFailed(f"malformed handle {handle:#010x}")
            break
        path.append(index)
    return tuple(path)


def _jsonable(value):
    if isinstance(value, enum.Enum):
        return value.name
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, CapSpace):
        return value.pid
    return value


def _traced(fn):
    name = fn.__name__

    @functools.wraps(fn)
    def wrapper(self, *args, **kwargs):
        system = self.system
        before = system.snapshot() if system.trace.enabled else None
        try:
            out = fn(self, *args, **kwargs)
        except SimError as exc:
            system.log(name, self.pid, args, kwargs, type(exc).__name__, before)
            raise
        system.log(name, self.pid, args, kwargs, "ok", before)
        return out

    return wrapper


class CapSystem:
    """Kernel-wide capability state: the derivation database and all spaces."""

    def __init__(self, total_phys_bytes: int, trace: Trace | None = None):
        self.total_phys_bytes = total_phys_bytes
        self.db = DerivationDB()
        self.trace = trace if trace is not None else Trace()
        self.observer: CapObserver | None = None
        self.spaces: list[CapSpace] = []
        self.cnode_epoch = 0
        self._dying: set[CapObject] = set()

    def new_space(self) -> CapSpace:
        space = CapSpace(self, len(self.spaces) + 1)
        self.spaces.append(space)
        return space

    # -- tracing ---------------------------------------------------------

    def snapshot(self) -> dict[str, int]:
        if self.observer is not None and hasattr(self.observer, "snapshot"):
            return self.observer.snapshot()
        return {"caps": len(self.db)}

    def log(self, name, pid, args, kwargs, result, before) -> None:
        delta = None
        if before is not None:
            after = self.snapshot()
            delta = {k: after[k] - before.get(k, 0) for k in after if after[k] != before.get(k, 0)}
        payload = {f"a{i}": _jsonable(a) for i, a in enumerate(args)}
        payload.update({k: _jsonable(v) for k, v in kwargs.items()})
        self.trace.record(name, pid, payload, result, delta)

    # -- removal machinery shared by delete and revoke --------------------

    def _unslot(self, cap: Capability) -> None:
        if self.observer is not None:
            self.observer.capability_removed(cap)
        if cap.location is not None:
            slots, index = cap.location
            slots.slots[index] = None
            slots.free += 1
            if index < slots.hint:
                slots.hint = index
            cap.location = None
        cap.obj.copies.remove(cap)
        self.db._caps -= 1
        if cap.obj.cap_type is CapType.CNODE:
            self.cnode_epoch += 1

    def _forget_object(self, obj: CapObject) -> None:
        if self.observer is not None:
            self.observer.object_destroyed(obj)
        self.db.drop_object(obj)

    def remove_capability(self, cap: Capability) -> None:
        """Remove one capability; orphaned children are re-parented."""
        self._unslot(cap)
        if not cap.obj.copies:
            self._forget_object(cap.obj)

    def destroy_capability(self, cap: Capability, keep: Capability | None = None) -> None:
        """Remove one capability, cascading into CNode contents and subtrees."""
        obj = cap.obj
        last = len(obj.copies) == 1
        if last and obj.cnode is not None and obj not in self._dying:
            self._dying.add(obj)
            try:
                for inner in list(obj.cnode.slots):
                    if inner is not None and inner is not keep and inner is not cap and inner.location is not None:
                        self.destroy_capability(inner, keep)
            finally:
                self._dying.discard(obj)
        if cap.location is None and cap not in obj.copies:
            return
        if last:
            for child in list(obj.children):
                self.destroy_object(child, keep)
        self._unslot(cap)
        if not obj.copies:
            self._forget_object(obj)

    def destroy_object(self, obj: CapObject, keep: Capability | None = None) -> None:
        for child in list(obj.children):
            self.destroy_object(child, keep)
        for cap in list(obj.copies):
            if cap is keep:
                continue
            if cap in obj.copies:
                self.destroy_capability(cap, keep)


def _reachable_cnodes(start: CNodeSlots) -> set[int]:
    """ids of ``start`` and every CNode reachable through its slots."""
    seen = {id(start)}
    stack = [start]
    while stack:
        for cap in stack.pop().slots:
            if cap is not None and cap.obj.cnode is not None and id(cap.obj.cnode) not in seen:
                seen.add(id(cap.obj.cnode))
                stack.append(cap.obj.cnode)
    return seen


class CapSpace:
    """A process's capability address space: a radix tree of CNodes."""

    def __init__(self, system: CapSystem, pid: int):
        self.system = system
        self.pid = pid
        self.root = CNodeSlots()
        self._order: list[tuple[tuple[int, ...], CNodeSlots]] | None = None
        self._paths: dict[int, tuple[int, ...]] = {}
        self._epoch = -1

    def __repr__(self) -> str:
        return f"<CapSpace pid={self.pid}>"

    # -- handle resolution -----------------------------------------------

    def _locate(self, handle: int) -> tuple[CNodeSlots, int]:
        path = decode_handle(handle)
        if not path:
            raise LookupFailed("empty handle")
        slots = self.root
        for depth, index in enumerate(path):
            if depth == len(path) - 1:
                return slots, index
            cap = slots.slots[index]
            if cap is None or cap.obj.cnode is None:
                raise LookupFailed(f"handle {handle:#010x}: no CNode at depth {depth}")
            slots = cap.obj.cnode
        raise AssertionError("unreachable")

    def resolve(self, handle: int) -> Capability:
        slots, index = self._locate(handle)
        cap = slots.slots[index]
        if cap is None:
            raise LookupFailed(f"handle {handle:#010x}: empty slot")
        return cap

    def lookup(self, handle: int) -> CapView:
        cap = self.resolve(handle)
        return CapView(cap.cap_type, cap.base, cap.size, cap.rights,
                       cap.mapping is not None, len(cap.obj.copies), len(cap.obj.children))

    def _cnodes(self) -> list[tuple[tuple[int, ...], CNodeSlots]]:
        if self._order is not None and self._epoch == self.system.cnode_epoch:
            return self._order
        order = [((), self.root)]
        seen = {id(self.root): ()}
        i = 0
        while i < len(order):
            path, slots = order[i]
            i += 1
            if len(path) + 1 >= MAX_DEPTH:
                continue
            for index in range(1, CNODE_SLOTS):
                cap = slots.slots[index]
                if cap is not None and cap.obj.cnode is not None and id(cap.obj.cnode) not in seen:
                    seen[id(cap.obj.cnode)] = path + (index,)
                    order.append((path + (index,), cap.obj.cnode))
        self._order = order
        self._paths = seen
        self._epoch = self.system.cnode_epoch
        return order

    def handles(self) -> Iterator[tuple[int, Capability]]:
        """Every (handle, capability) reachable from the root."""
        for path, slots in self._cnodes():
            for index in range(1, CNODE_SLOTS):
                cap = slots.slots[index]
                if cap is not None:
                    yield encode_handle(path + (index,)), cap

    def free_slots(self) -> int:
        return sum(slots.free for _, slots in self._cnodes())

    def _alloc_slots(self, n: int, cnode: bool = False,
                     inner: CNodeSlots | None = None) -> list[tuple[CNodeSlots, int, int]]:
        """Find ``n`` free slots.

        Ordinary capabilities fill the deepest CNodes first, which keeps
        shallow slots available for CNodes; a CNode needs a slot whose
        handle leaves room for one more level.  A capability to ``inner``
        is never placed where it would make ``inner`` contain itself.
        """
        order = self._cnodes()
        banned = _reachable_cnodes(inner) if inner is not None else ()
        out: list[tuple[CNodeSlots, int, int]] = []
        for path, slots in (order if cnode else reversed(order)):
            if not slots.free or (cnode and len(path) + 2 > MAX_DEPTH) or id(slots) in banned:
                continue
            index = slots.hint
            while len(out) < n and index < CNODE_SLOTS:
                if slots.slots[index] is None:
                    out.append((slots, index, encode_handle(path + (index,))))
                index += 1
            if len(out) >= n:
                return out
        raise SlotExhausted(f"need {n} slots, {len(out)} free")

    def _place(self, cap: Capability, slot: tuple[CNodeSlots, int, int]) -> int:
        slots, index, handle = slot
        slots.slots[index] = cap
        slots.free -= 1
        if index == slots.hint:
            slots.hint = index + 1
        cap.location = (slots, index)
        if cap.obj.cnode is not None:
            system = self.system
            fresh = self._order is not None and self._epoch == system.cnode_epoch
            system.cnode_epoch += 1
            if fresh:
                # extend the cached traversal instead of rebuilding it
                path = self._paths.get(id(slots))
                inner = cap.obj.cnode
                if path is not None and len(path) + 1 < MAX_DEPTH and id(inner) not in self._paths:
                    self._paths[id(inner)] = path + (index,)
                    self._order.append((path + (index,), inner))
                self._epoch = system.cnode_epoch
        return handle

    # -- operations --------------------------------------------------------

    @_traced
    def retype(self, src: int, target: CapType, obj_size: int, count: int = 1,
               *, offset: int = 0) -> list[int]:
        """Carve ``count`` objects of ``target`` type out of ``src``.

        Objects are sliced contiguously starting ``offset`` bytes into the
        source region.  The source capability stays in place as the parent.
        """
        cap = self.resolve(src)
        if target not in RETYPE_EDGES.get(cap.cap_type, ()):
            raise DisallowedTransition(f"{cap.cap_type.name} -> {target.name}")
        if not is_pow2(obj_size) or obj_size < PAGE_SIZE:
            raise InvalidSize(f"object size {obj_size:#x}")
        if (target.is_table or target is CapType.CNODE) and obj_size != PAGE_SIZE:
            raise InvalidSize(f"{target.name} objects are exactly 4 KiB")
        if target is CapType.UNTYPED and obj_size >= cap.size:
            raise InvalidSize("an Untyped split must produce smaller regions")
        if count < 1 or offset < 0 or offset % obj_size or offset + count * obj_size > cap.size:
            raise InvalidSize(f"{count} x {obj_size:#x} at +{offset:#x} exceeds {cap.size:#x}")
        lo = cap.base + offset
        hi = lo + count * obj_size
        children = cap.obj.children
        pos = children.bisect_key_left(hi)
        if pos and children[pos - 1].end > lo:
            raise HasConflictingDescendants(f"[{lo:#x}, {hi:#x}) already derived")
        slots = self._alloc_slots(count, cnode=target is CapType.CNODE)
        db = self.system.db
        observer = self.system.observer
        handles = []
        for i, slot in enumerate(slots):
            obj = db.new_object(target, lo + i * obj_size, obj_size, cap.obj)
            new = Capability(obj, cap.rights)
            obj.copies.append(new)
            db._caps += 1
            handles.append(self._place(new, slot))
            if observer is not None:
                observer.object_created(obj)
        return handles

    @_traced
    def copy(self, src: int, *, rights: Rights | None = None,
             into: CapSpace | None = None) -> int:
        """Create a sibling capability, optionally with fewer rights or in another space."""
        cap = self.resolve(src)
        new_rights = cap.rights if rights is None else rights
        if new_rights & ~cap.rights:
            raise RightsExceeded(f"{new_rights} exceeds {cap.rights}")
        dest = into if into is not None else self
        if dest.system is not self.system:
            raise LookupFailed("spaces belong to different kernels")
        slot = dest._alloc_slots(1, cnode=cap.obj.cnode is not None, inner=cap.obj.cnode)[0]
        new = Capability(cap.obj, new_rights)
        cap.obj.copies.append(new)
        self.system.db._caps += 1
        return dest._place(new, slot)

    @_traced
    def delete(self, handle: int) -> None:
        cap = self.resolve(handle)
        if cap.obj.cnode is not None and len(cap.obj.copies) == 1 and cap.obj.cnode.occupied():
            raise NotEmpty(f"CNode holds {cap.obj.cnode.occupied()} capabilities")
        self.system.remove_capability(cap)

    @_traced
    def revoke(self, handle: int) -> None:
        """Delete every copy and every descendant of ``handle``, keeping ``handle``."""
        cap = self.resolve(handle)
        system = self.system
        obj = cap.obj
        for child in list(obj.children):
            system.destroy_object(child, keep=cap)
        for other in list(obj.copies):
            if other is not cap and other in obj.copies:
                system.destroy_capability(other, keep=cap)


def bootstrap(total_phys_bytes: int, trace: Trace | None = None) -> tuple[CapSpace, int]:
    """Create a capability system whose only object is one Untyped over all memory."""
    if not is_pow2(total_phys_bytes) or total_phys_bytes < MIN_PHYS:
        raise InvalidSize(f"physical memory size {total_phys_bytes:#x} is not a power of two >= 1 MiB")
    system = CapSystem(total_phys_bytes, trace)
    space = system.new_space()
    obj = system.db.new_object(CapType.UNTYPED, 0, total_phys_bytes, None)
    cap = Capability(obj, Rights.RW)
    obj.copies.append(cap)
    system.db._caps += 1
    return space, space._place(cap, space._alloc_slots(1)[0])
