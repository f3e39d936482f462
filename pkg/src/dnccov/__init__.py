"""Divide-and-conquer Bayesian covariance estimation with coupled sparse factor models."""

from .engine import BudgetExceeded, PosteriorAccumulator, RunConfig, RunReport, SamplerError, combine, run_estimation
from .model import (
    CovEstimate,
    DataMatrix,
    MgpsHyperparams,
    Partition,
    center_columns,
    make_partition,
    materialize_covariance,
)

__all__ = [
    "BudgetExceeded",
    "CovEstimate",
    "DataMatrix",
    "MgpsHyperparams",
    "Partition",
    "PosteriorAccumulator",
    "RunConfig",
    "RunReport",
    "SamplerError",
    "center_columns",
    "combine",
    "make_partition",
    "materialize_covariance",
    "run_estimation",
]
