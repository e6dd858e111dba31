"""Slotted C-RAN random access simulation and sector-device link classification."""

from cranlink.errors import ConfigError, MalformedReportError, SolverDivergenceError

__version__ = "0.1.0"

__all__ = ["ConfigError", "MalformedReportError", "SolverDivergenceError", "__version__"]
