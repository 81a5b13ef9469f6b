"""latentdml: debiased treatment-effect estimation with latent-variable residual models.

Pipeline: cross-fitted ElasticNet residualization of outcome and treatment,
then residual modeling by EM under either an asymmetric outcome-shock model or
a two-point unobserved-confounder model, with BIC selection between them, plus
a deterministic Monte Carlo benchmark harness and a command-line front end.
"""

__version__ = "0.1.0"

from .errors import (
    DegenerateDataError,
    DegenerateTreatmentError,
    EmAscentError,
    InvalidDataError,
    InvalidParameterError,
    LatentDmlError,
    ModelSelectionError,
    ShapeError,
    SingularSystemError,
    UnknownPresetError,
)
from .numerics import (
    RngStream,
    TruncatedNormalMoments,
    derive_seed,
    emg_log_density,
    solve_2x2,
    truncated_normal_moments,
)

__all__ = [
    "DegenerateDataError",
    "DegenerateTreatmentError",
    "EmAscentError",
    "InvalidDataError",
    "InvalidParameterError",
    "LatentDmlError",
    "ModelSelectionError",
    "RngStream",
    "ShapeError",
    "SingularSystemError",
    "TruncatedNormalMoments",
    "UnknownPresetError",
    "derive_seed",
    "emg_log_density",
    "solve_2x2",
    "truncated_normal_moments",
    "__version__",
]
