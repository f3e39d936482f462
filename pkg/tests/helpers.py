"""Shared Monte Carlo assertions for the test suite."""

import numpy as np


def mean_and_se(draws):
    draws = np.asarray(draws, dtype=float)
    n = draws.shape[0]
    return draws.mean(axis=0), draws.std(axis=0, ddof=1) / np.sqrt(n)


def assert_mean_within(draws, expected, n_se=3.0):
    """Every component of the sample mean lies within ``n_se`` standard errors."""
    mean, se = mean_and_se(draws)
    expected = np.broadcast_to(np.asarray(expected, dtype=float), mean.shape)
    z = np.abs(mean - expected) / se
    assert np.all(z <= n_se), f"max |z| = {z.max():.2f}; mean={mean}, expected={expected}"


def cov_and_se(draws):
    """Sample covariance of rows of ``draws`` (N x d) and an entrywise standard error."""
    draws = np.asarray(draws, dtype=float)
    n = draws.shape[0]
    centred = draws - draws.mean(axis=0)
    prods = centred[:, :, None] * centred[:, None, :]
    cov = prods.mean(axis=0)
    se = prods.std(axis=0, ddof=1) / np.sqrt(n)
    return cov, se


def cov_within(draws, expected, n_se):
    """Largest entrywise z-score of the sample covariance against ``expected``."""
    cov, se = cov_and_se(draws)
    return float(np.max(np.abs(cov - expected) / np.maximum(se, 1e-300)))


def assert_cov_within(draws, expected, n_se=3.0):
    z = cov_within(draws, expected, n_se)
    assert z <= n_se, f"max |z| = {z:.2f}"
