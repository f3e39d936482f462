"""Synthetic benchmark data with known covariance."""

from __future__ import annotations

import math

import numpy as np

from .mgps import sparse_truth
from .model import DataMatrix, center_columns, cov_estimate_from_blocks, materialize_covariance
from .rng import as_generator


def default_sparsity(p: int) -> int:
    return math.ceil(p / 20)


def generate(p: int, k: int, s: int | None, n: int, sigma2: float = 0.5, seed=None, center: bool = True):
    """Sparse factor-model data.

    Each loadings column has exactly ``s`` nonzeros at random rows, drawn from
    Uniform(0.1, 3); ``y_i = L eta_i + e_i`` with standard normal factors and
    ``N(0, sigma2 I)`` noise.

    Returns
    -------
    data : DataMatrix
        Column-centred draws (raw draws when ``center`` is False, with zero
        recorded means).
    loadings : np.ndarray, shape (p, k)
    sigma : np.ndarray, shape (p, p)
        ``L L^T + sigma2 I``.
    """
    s = default_sparsity(p) if s is None else s
    if not 1 <= s <= p:
        raise ValueError(f"need 1 <= s <= p, got s={s}, p={p}")
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    if n < 2:
        raise ValueError("need at least 2 samples")
    rng = as_generator(seed)
    loadings = sparse_truth(p, k, s, rng)
    eta = rng.standard_normal((n, k))
    y = eta @ loadings.T + math.sqrt(sigma2) * rng.standard_normal((n, p))
    sigma = loadings @ loadings.T
    sigma[np.diag_indices(p)] += sigma2
    data = center_columns(y) if center else DataMatrix(y, np.zeros(p))
    return data, loadings, sigma


def sample_coupled(loadings, noise, rho: float, n: int, seed=None) -> np.ndarray:
    """Draws from the coupled model; columns are the group blocks concatenated.

    ``y_i[m] = L[m] (sqrt(rho) X_i + sqrt(1 - rho) Z_i[m]) + e_i[m]``.
    """
    rng = as_generator(seed)
    k = loadings[0].shape[1]
    shared = rng.standard_normal((n, k))
    blocks = []
    for lam, sig in zip(loadings, noise):
        idio = rng.standard_normal((n, k))
        eta = math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * idio
        blocks.append(eta @ lam.T + rng.standard_normal((n, lam.shape[0])) * np.sqrt(sig))
    return np.hstack(blocks)


def generate_coupled(sizes, k_g: int, rho: float, n: int, sigma2: float = 0.5, seed=None,
                     low: float = 0.5, high: float = 2.0):
    """Data from the coupled group model with dense Uniform(low, high) loadings.

    Columns are laid out group after group.  Returns the centred data, the
    per-group loadings and the true covariance.
    """
    rng = as_generator(seed)
    loadings = [rng.uniform(low, high, size=(size, k_g)) * rng.choice([-1.0, 1.0], size=(size, k_g))
                for size in sizes]
    noise = [np.full(size, sigma2) for size in sizes]
    y = sample_coupled(loadings, noise, rho, n, rng)
    sigma = materialize_covariance(cov_estimate_from_blocks(loadings, noise, rho))
    return center_columns(y), loadings, sigma


def write_dataset(path_prefix, data: DataMatrix, loadings: np.ndarray, sigma: np.ndarray) -> dict:
    """CSV export of data, true loadings and true covariance; returns the file names."""
    files = {
        "data": f"{path_prefix}data.csv",
        "loadings": f"{path_prefix}loadings.csv",
        "sigma": f"{path_prefix}sigma.csv",
    }
    np.savetxt(files["data"], data.values + data.column_means, delimiter=",", fmt="%.17g")
    np.savetxt(files["loadings"], loadings, delimiter=",", fmt="%.17g")
    np.savetxt(files["sigma"], sigma, delimiter=",", fmt="%.17g")
    return files
