"""Numerical tools for extended mean-field control problems."""

from .core import (
    EmpiricalLaw,
    ModelSpec,
    NoiseStream,
    ParticleEnsemble,
    TimeGrid,
    check_derivatives,
    empirical_law,
    law_stats,
    wasserstein2_1d,
)

__version__ = "0.1.0"

__all__ = [
    "EmpiricalLaw",
    "ModelSpec",
    "NoiseStream",
    "ParticleEnsemble",
    "TimeGrid",
    "check_derivatives",
    "empirical_law",
    "law_stats",
    "wasserstein2_1d",
    "__version__",
]
