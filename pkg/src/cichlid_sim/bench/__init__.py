"""Benchmark harness reproducing the experiments at desk scale."""

from .cachemodel import CacheModel
from .experiments import EXPERIMENTS
from .report import BenchReport, Harness, strip_wallclock
from .rng import Rng

__all__ = ["BenchReport", "CacheModel", "EXPERIMENTS", "Harness", "Rng", "strip_wallclock"]
