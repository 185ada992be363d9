"""Variational prior replacement for Bayesian inverse problems."""

__version__ = "0.1.0"

from .gaussian import (  # noqa: E402
    GaussianVariational,
    SparsityPattern,
    StructuredCholesky,
    densify,
    load_variational,
    log_density,
    sample_reparam,
    save_variational,
)
from .transforms import BoundedBox, log_abs_det_jacobian, to_physical, to_unbounded  # noqa: E402

__all__ = [
    "BoundedBox",
    "GaussianVariational",
    "SparsityPattern",
    "StructuredCholesky",
    "densify",
    "load_variational",
    "log_abs_det_jacobian",
    "log_density",
    "sample_reparam",
    "save_variational",
    "to_physical",
    "to_unbounded",
]
