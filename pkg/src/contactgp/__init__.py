"""Estimation of fine age- and gender-structured social contact intensity
matrices from coarsely age-bracketed, longitudinal survey data."""

__version__ = "0.1.0"

from contactgp.grids import AgeGrid, CoarseBracketing, DiffGrid
from contactgp.kernels import HsgpConfig, KernelHyperparams

__all__ = [
    "AgeGrid",
    "CoarseBracketing",
    "DiffGrid",
    "HsgpConfig",
    "KernelHyperparams",
    "__version__",
]
