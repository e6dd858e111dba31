class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class MalformedReportError(ValueError):
    """An RA report with conflicting or incomplete per-slot outcomes."""


class SolverDivergenceError(RuntimeError):
    """The factorization objective became non-finite."""
