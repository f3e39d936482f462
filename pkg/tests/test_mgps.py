import csv

import numpy as np
import pytest

from dnccov.mgps import (
    TRACE_CSV_COLUMNS,
    delta_conditional,
    sample_prior_loadings,
    trace_concentration_experiment,
    update_delta,
    update_phi,
    write_trace_csv,
)
from dnccov.model import MgpsHyperparams, MgpsState

from helpers import assert_mean_within

HYPER = MgpsHyperparams()


def oracle_delta_params(delta, h, phi, lam, hyper):
    """Shape/rate of delta_h written out term by term (0-based h)."""
    p, k = lam.shape
    shape = (hyper.a1 if h == 0 else hyper.a2) + p * (k - h) / 2.0
    total = 0.0
    for l in range(h, k):
        tau_l = 1.0
        for t in range(l + 1):
            if t != h:
                tau_l *= delta[t]
        total += tau_l * sum(phi[j, l] * lam[j, l] ** 2 for j in range(p))
    return shape, 1.0 + 0.5 * total


# --- prior draws ------------------------------------------------------------------

def test_prior_column_variance_near_inverse_tau():
    nu = 1e6
    hyper = MgpsHyperparams(nu=nu)
    scaled = []
    for seed in range(10_000):
        lam, state = sample_prior_loadings(1, 1, hyper, seed=seed)
        scaled.append(lam[0, 0] ** 2 * state.tau[0])
    assert_mean_within(scaled, nu / (nu - 2))


def test_prior_tau_ratio_increases():
    ratios = []
    for seed in range(10_000):
        _, state = sample_prior_loadings(2, 4, HYPER, seed=seed)
        ratios.append(state.tau[1:] / state.tau[:-1])
    assert np.all(np.mean(ratios, axis=0) >= 1.0)


def test_prior_deterministic():
    a = sample_prior_loadings(6, 3, HYPER, seed=11)
    b = sample_prior_loadings(6, 3, HYPER, seed=11)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1].phi, b[1].phi)
    np.testing.assert_array_equal(a[1].tau, np.cumprod(a[1].delta))


def test_prior_rejects_a2():
    with pytest.raises(ValueError, match="a2"):
        sample_prior_loadings(3, 2, MgpsHyperparams(a2=0.5), seed=0)


# --- phi ------------------------------------------------------------------------------

def test_phi_zero_loadings_mean():
    n = 50_000
    state = MgpsState.initial(n, 1, HYPER)
    out = update_phi(state, np.zeros((n, 1)), seed=1)
    assert_mean_within(out.phi[:, 0], (HYPER.nu + 2) / HYPER.nu)


def test_phi_large_signal_mean():
    n = 50_000
    tau = np.array([40.0])
    state = MgpsState(np.ones((n, 1)), tau, tau, HYPER)
    lam = np.full((n, 1), 1.5)
    out = update_phi(state, lam, seed=2)
    nu = HYPER.nu
    assert_mean_within(out.phi[:, 0], (nu + 2) / (nu + tau[0] * 1.5**2))
    np.testing.assert_array_equal(out.tau, tau)


def test_phi_smoke():
    out = update_phi(MgpsState.initial(1, 1, HYPER), np.array([[0.3]]), seed=3)
    assert out.phi.shape == (1, 1) and out.phi[0, 0] > 0


def test_phi_dimension_mismatch():
    with pytest.raises(ValueError):
        update_phi(MgpsState.initial(2, 2, HYPER), np.zeros((3, 2)))


# --- delta ------------------------------------------------------------------------------

def test_delta_conditional_matches_oracle():
    rng = np.random.default_rng(0)
    p, k = 5, 4
    lam = rng.standard_normal((p, k))
    phi = rng.gamma(2.0, 1.0, size=(p, k))
    delta = rng.gamma(2.0, 1.0, size=k)
    weighted = np.einsum("jh,jh->h", phi, lam**2)
    for h in range(k):
        np.testing.assert_allclose(delta_conditional(delta, h, weighted, p, HYPER),
                                   oracle_delta_params(delta, h, phi, lam, HYPER), rtol=1e-13)


def test_delta_zero_loadings_first_multiplier():
    p, k = 3, 2
    state = MgpsState.initial(p, k, HYPER)
    rng = np.random.default_rng(4)
    draws = [update_delta(state, np.zeros((p, k)), seed=rng).delta[0] for _ in range(50_000)]
    assert_mean_within(draws, p * k / 2 + HYPER.a1)


def test_delta_single_column():
    state = MgpsState.initial(4, 1, HYPER)
    out = update_delta(state, np.ones((4, 1)), seed=5)
    assert out.delta.shape == (1,)
    assert out.tau[0] == out.delta[0]


def test_delta_generic_conditional_means():
    rng = np.random.default_rng(6)
    p, k = 4, 3
    lam = rng.standard_normal((p, k)) * 0.7
    phi = rng.gamma(3.0, 1.0, size=(p, k))
    start = np.array([1.3, 2.0, 2.5])
    state = MgpsState(phi, start, np.cumprod(start), HYPER)
    first, last_resid = [], []
    for _ in range(50_000):
        out = update_delta(state, lam, seed=rng)
        first.append(out.delta[0])
        shape, rate = oracle_delta_params(out.delta, k - 1, phi, lam, HYPER)
        last_resid.append(out.delta[-1] - shape / rate)
    shape, rate = oracle_delta_params(start, 0, phi, lam, HYPER)
    assert_mean_within(first, shape / rate)
    assert_mean_within(last_resid, 0.0)


def test_tau_product_and_positivity_over_many_updates():
    rng = np.random.default_rng(7)
    lam = rng.standard_normal((6, 4))
    state = MgpsState.initial(6, 4, HYPER)
    for _ in range(10_000):
        state = update_delta(update_phi(state, lam, seed=rng), lam, seed=rng)
        assert np.all(state.phi > 0) and np.all(state.delta > 0)
    np.testing.assert_allclose(state.tau, np.cumprod(state.delta), rtol=1e-12)


# --- trace concentration --------------------------------------------------------------

def test_trace_experiment_curve(tmp_path):
    eps = [0.1, 1.0, 10.0, 100.0, 1e12]
    rows = trace_concentration_experiment(20, 2, 2, HYPER, eps, 20_000, seed=0)
    probs = [row["probability"] for row in rows]
    assert np.all(np.diff(probs) >= 0)
    assert probs[-1] == 1.0
    assert all(np.isfinite(row["mc_stderr"]) for row in rows)
    path = tmp_path / "trace.csv"
    write_trace_csv(rows, path)
    with open(path) as fh:
        reader = csv.reader(fh)
        assert tuple(next(reader)) == TRACE_CSV_COLUMNS
        assert len(list(reader)) == len(eps)


def test_trace_experiment_grouped():
    rows = trace_concentration_experiment(20, 4, 2, HYPER, [1.0, 1e12], 2_000, seed=1, groups=2)
    assert rows[-1]["probability"] == 1.0


@pytest.mark.parametrize("s", [0, 11, 25])
def test_trace_experiment_rejects_sparsity(s):
    with pytest.raises(ValueError, match="sparsity"):
        trace_concentration_experiment(20, 2, s, HYPER, [1.0], 10, seed=0)
