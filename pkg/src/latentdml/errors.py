"""Exception hierarchy for latentdml.

Every error raised deliberately by the package derives from LatentDmlError so
callers (and the CLI exit-code mapping) can distinguish package failures from
programming bugs.
"""


class LatentDmlError(Exception):
    """Base class for all latentdml errors."""


class InvalidParameterError(LatentDmlError, ValueError):
    """A parameter is outside its documented domain (bad flag, bad config value)."""


class InvalidDataError(LatentDmlError, ValueError):
    """Input data violates a precondition (non-finite values, bad CSV cell, too few rows)."""


class ShapeError(InvalidDataError):
    """Array dimensions do not line up."""


class SingularSystemError(LatentDmlError, ArithmeticError):
    """A linear system is numerically singular."""


class DegenerateDataError(LatentDmlError):
    """Residuals or inputs are degenerate (zero variance where variance is required)."""


class DegenerateTreatmentError(DegenerateDataError):
    """Treatment residuals are identically zero, so no effect is identified."""


class EmAscentError(LatentDmlError):
    """Internal consistency failure: an EM iteration decreased the marginal log-likelihood."""


class UnknownPresetError(InvalidParameterError):
    """Requested scenario preset does not exist."""


class ModelSelectionError(LatentDmlError):
    """Every candidate model failed to fit; carries the per-candidate causes."""

    def __init__(self, causes: dict):
        self.causes = dict(causes)
        lines = "; ".join(f"{kind}: {exc}" for kind, exc in self.causes.items())
        super().__init__(f"all candidate models failed ({lines})")
