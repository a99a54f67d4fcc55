"""Exception types raised by the library.

Absorption itself is never an error: a path that hits the boundary is a
valid outcome and is reported through ``AbsorbedPath.tau``.  The errors
below mark genuine failures: numerically degenerate spectra, exhausted
survivor budgets, or invalid inputs.
"""


class QlyapError(Exception):
    """Base class for library errors."""


class NonUniqueQSD(QlyapError):
    """The two largest eigenvalue moduli of the killed operator coincide
    within tolerance, so the quasi-stationary measure is not numerically
    unique."""

    def __init__(self, msg, rho=None, second=None):
        super().__init__(msg)
        self.rho = rho
        self.second = second


class NoSurvival(QlyapError):
    """The dominant eigenvalue is indistinguishable from zero: the
    discretized dynamics lose all mass in one operator step."""


class EmptyCellError(QlyapError):
    """A grid cell that intersects the domain produced no valid sample
    starts (rejection sampling exhausted)."""


class EtaFloorError(QlyapError):
    """Cells had to be dropped because the eigenfunction fell below the
    positivity floor, and the caller required a fully retained grid."""

    def __init__(self, msg, dropped=()):
        super().__init__(msg)
        self.dropped = list(dropped)


class EtaNonPositive(QlyapError):
    """The eigenfunction interpolant was queried where it is <= 0."""


class InsufficientSurvivors(QlyapError):
    """Fewer surviving trajectories than the configured minimum."""

    def __init__(self, msg, survivors=None, required=None):
        super().__init__(msg)
        self.survivors = survivors
        self.required = required


class LeakageAbort(QlyapError):
    """A Q-process trajectory was absorbed.  Theory gives this probability
    zero; in practice it is a time-discretization artifact near the
    boundary and the affected computation cannot proceed."""


class RankCollapseError(QlyapError):
    """A propagated frame lost numerical rank (zero diagonal in the thin
    QR factor)."""

    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


class MissingSpectralData(QlyapError):
    """An operation that needs (beta, eta) was invoked without spectral
    data."""


class ConfigError(QlyapError):
    """Invalid experiment configuration."""


class IntegrityError(QlyapError):
    """A serialized artifact failed structural validation on load."""
