"""User-level memory management library."""

from .heap import Heap
from .pager import Pager, PagerStats, fifo
from .startup import ProcessImage, spawn
from .store import BackingStore
from .vspace import MemObj, StatusBits, VRegion, VSpace

__all__ = ["BackingStore", "Heap", "MemObj", "Pager", "PagerStats", "ProcessImage", "StatusBits",
           "VRegion", "VSpace", "fifo", "spawn"]
