"""Exception types shared across the package."""


class SchwarzError(Exception):
    """Base class for all package-specific errors.

    Drivers that fail mid-run attach the iterations completed so far as
    ``partial_trace`` before re-raising, for post-mortem inspection.
    """

    partial_trace = None


class ConfigError(SchwarzError):
    """Invalid configuration value or incompatible parameter combination."""


class DimensionError(SchwarzError):
    """Operands whose sizes do not match."""


class NumericalError(SchwarzError):
    """A non-finite value appeared where a finite one is required."""


class LocalSolveError(SchwarzError):
    """A subspace solve failed to converge or produced invalid output."""

    def __init__(self, subspace: int, message: str):
        super().__init__(f"local solve on subspace {subspace} failed: {message}")
        self.subspace = subspace


class BacktrackDiverged(SchwarzError):
    """The step-size search exhausted its trial budget.

    Carries the full trial ladder as a list of (tau, energy, accepted)
    tuples for post-mortem inspection.
    """

    def __init__(self, message: str, ladder):
        super().__init__(message)
        self.ladder = list(ladder)
