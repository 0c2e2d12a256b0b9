"""Offline replay harness: scripted scenarios, a mock registry serving the
real wire shapes, an independent oracle, and a simulated-clock driver."""

from .scenario import Scenario, tarball_bytes
from .mockserver import MockRegistry
from .driver import run_scenario
from . import builders

__all__ = ["Scenario", "tarball_bytes", "MockRegistry", "run_scenario", "builders"]
