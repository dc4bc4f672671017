"""Executable model of capability-mediated explicit physical memory management."""

__version__ = "0.1.0"
