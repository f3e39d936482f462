import json

import numpy as np
import pytest

from dnccov.model import (
    CovEstimate,
    MgpsHyperparams,
    Partition,
    SharedLatentState,
    center_columns,
    compose_eta,
    cov_estimate_from_blocks,
    default_rho_grid,
    make_partition,
    materialize_covariance,
    write_covariance_csv,
)
from dnccov.synth import sample_coupled

from helpers import assert_cov_within, cov_within


def dense_sigma(loadings, noise, rho):
    """Brute-force D E D^T + Omega with explicit Kronecker blocks."""
    g = len(loadings)
    k = loadings[0].shape[1]
    sizes = [blk.shape[0] for blk in loadings]
    D = np.zeros((sum(sizes), g * k))
    r = 0
    for m, blk in enumerate(loadings):
        D[r:r + sizes[m], m * k:(m + 1) * k] = blk
        r += sizes[m]
    C = np.full((g, g), rho)
    np.fill_diagonal(C, 1.0)
    E = np.kron(C, np.eye(k))
    return D @ E @ D.T + np.diag(np.concatenate(noise))


def random_estimate(rng, g=3, k=2, sizes=None, rho=None):
    sizes = sizes or list(rng.integers(1, 5, size=g))
    loadings = [rng.standard_normal((s, k)) for s in sizes]
    noise = [rng.uniform(0.2, 1.0, size=s) for s in sizes]
    rho = float(rng.uniform()) if rho is None else rho
    return loadings, noise, rho


# --- center_columns ---------------------------------------------------------

def test_center_two_by_one():
    dm = center_columns([[1.0], [3.0]])
    np.testing.assert_array_equal(dm.values, [[-1.0], [1.0]])
    np.testing.assert_array_equal(dm.column_means, [2.0])


def test_center_already_centred():
    raw = np.array([[1.0, -2.0], [-1.0, 2.0]])
    dm = center_columns(raw)
    np.testing.assert_allclose(dm.values, raw)
    np.testing.assert_allclose(dm.column_means, 0.0, atol=1e-15)


def test_center_constant_columns():
    dm = center_columns(np.ones((3, 2)))
    np.testing.assert_array_equal(dm.values, np.zeros((3, 2)))
    np.testing.assert_array_equal(dm.column_means, [1.0, 1.0])


def test_center_column_sums_vanish():
    raw = np.random.default_rng(0).normal(5.0, 3.0, size=(200, 7))
    dm = center_columns(raw)
    assert np.all(np.abs(dm.values.sum(axis=0)) <= 1e-9 * dm.n)
    assert (dm.n, dm.p) == (200, 7)


def test_center_rejects_non_finite_with_location():
    raw = np.zeros((3, 4))
    raw[2, 1] = np.nan
    with pytest.raises(ValueError, match="row 2, column 1"):
        center_columns(raw)


def test_center_rejects_single_row():
    with pytest.raises(ValueError, match="at least 2 rows"):
        center_columns([[1.0, 2.0]])


# --- partitions ---------------------------------------------------------------

def test_partition_equal_groups():
    part = make_partition(6, 3, seed=1)
    assert part.sizes == [2, 2, 2]


def test_partition_floor_ceil():
    part = make_partition(7, 3, seed=1)
    assert sorted(part.sizes) == [2, 2, 3]


def test_partition_single_group():
    part = make_partition(5, 1, seed=4)
    assert part.g == 1
    np.testing.assert_array_equal(part.groups[0], np.arange(5))


@pytest.mark.parametrize("p,g", [(10, 3), (11, 4), (50, 7), (9, 9)])
def test_partition_is_disjoint_cover(p, g):
    part = make_partition(p, g, seed=p * g)
    joined = np.sort(np.concatenate(part.groups))
    np.testing.assert_array_equal(joined, np.arange(p))
    assert set(part.sizes) <= {p // g, -(-p // g)}
    assert part.group_of().shape == (p,)


def test_partition_seeded():
    a, b = make_partition(40, 4, seed=9), make_partition(40, 4, seed=9)
    for x, y in zip(a.groups, b.groups):
        np.testing.assert_array_equal(x, y)
    assert a.seed == 9


@pytest.mark.parametrize("g", [0, 6])
def test_partition_rejects_bad_group_count(g):
    with pytest.raises(ValueError):
        make_partition(5, g, seed=0)


def test_partition_rejects_overlap():
    with pytest.raises(ValueError):
        Partition(3, (np.array([0, 1]), np.array([1, 2])))


# --- hyperparameters and latent state -------------------------------------------

def test_hyper_rejects_small_a2():
    with pytest.raises(ValueError, match="a2"):
        MgpsHyperparams(a2=1.0)


def test_hyper_rejects_non_positive():
    with pytest.raises(ValueError, match="nu"):
        MgpsHyperparams(nu=0.0)


def test_shared_state_rho_on_grid():
    grid = default_rho_grid(11)
    x = np.zeros((3, 1))
    SharedLatentState(x, (x,), 0.3, grid)
    with pytest.raises(ValueError):
        SharedLatentState(x, (x,), 0.35, grid)


def test_default_grid():
    grid = default_rho_grid()
    assert grid.size == 101
    np.testing.assert_allclose(np.diff(grid), 0.01)


def test_eta_marginal_is_standard():
    rng = np.random.default_rng(0)
    n = 200_000
    for rho in (0.0, 0.3, 1.0):
        eta = compose_eta(rng.standard_normal((n, 2)), rng.standard_normal((n, 2)), rho)
        assert_cov_within(eta, np.eye(2), n_se=4.0)


# --- covariance assembly ------------------------------------------------------------

def test_materialize_hand_case():
    est = cov_estimate_from_blocks([np.array([[1.0]]), np.array([[2.0]])], [np.array([0.5]), np.array([0.5])], 0.5)
    np.testing.assert_allclose(materialize_covariance(est), [[1.5, 1.0], [1.0, 4.5]])


def test_materialize_zero_coupling_is_block_diagonal():
    rng = np.random.default_rng(1)
    loadings, noise, _ = random_estimate(rng, g=2, sizes=[3, 2])
    sigma = materialize_covariance(cov_estimate_from_blocks(loadings, noise, 0.0))
    np.testing.assert_array_equal(sigma[:3, 3:], 0.0)
    np.testing.assert_allclose(sigma[:3, :3], loadings[0] @ loadings[0].T + np.diag(noise[0]))


def test_materialize_single_group():
    rng = np.random.default_rng(2)
    lam = rng.standard_normal((5, 2))
    sig = rng.uniform(0.1, 1, size=5)
    out = materialize_covariance(cov_estimate_from_blocks([lam], [sig], 0.4))
    np.testing.assert_allclose(out, lam @ lam.T + np.diag(sig), rtol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_materialize_matches_kronecker_oracle(seed):
    rng = np.random.default_rng(seed)
    loadings, noise, rho = random_estimate(rng, g=3, k=2)
    est = cov_estimate_from_blocks(loadings, noise, rho)
    out = materialize_covariance(est, block_rows=2)
    np.testing.assert_allclose(out, dense_sigma(loadings, noise, rho), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out, out.T, rtol=1e-10)
    vals = np.linalg.eigvalsh(out)
    assert vals.min() >= -1e-8 * vals.max()


def test_materialize_rejects_mixed_k():
    with pytest.raises(ValueError, match="k_g"):
        cov_estimate_from_blocks([np.ones((2, 1)), np.ones((2, 2))], [np.ones(2), np.ones(2)], 0.5)


def test_partition_order_restored():
    rng = np.random.default_rng(3)
    part = make_partition(7, 2, seed=5)
    loadings, noise, rho = random_estimate(rng, g=2, sizes=part.sizes)
    est = cov_estimate_from_blocks(loadings, noise, rho, part)
    grouped = dense_sigma(loadings, noise, rho)
    order = np.concatenate(part.groups)
    expected = np.empty_like(grouped)
    expected[np.ix_(order, order)] = grouped
    np.testing.assert_allclose(materialize_covariance(est), expected, rtol=1e-13)


def test_matvec_and_diagonal_match_dense():
    rng = np.random.default_rng(4)
    part = make_partition(9, 3, seed=2)
    loadings, noise, rho = random_estimate(rng, g=3, sizes=part.sizes)
    est = cov_estimate_from_blocks(loadings, noise, rho, part)
    dense = materialize_covariance(est)
    v = rng.standard_normal((9, 3))
    np.testing.assert_allclose(est.matvec(v), dense @ v, rtol=1e-12)
    np.testing.assert_allclose(est.matvec(v[:, 0]), dense @ v[:, 0], rtol=1e-12)
    np.testing.assert_allclose(est.diagonal(), np.diag(dense), rtol=1e-13)
    assert est.trace() == pytest.approx(np.trace(dense), rel=1e-13)


def test_trace_independent_of_rho():
    rng = np.random.default_rng(5)
    loadings, noise, _ = random_estimate(rng, g=3)
    traces = [np.trace(materialize_covariance(cov_estimate_from_blocks(loadings, noise, r))) for r in (0, 0.3, 0.9)]
    np.testing.assert_allclose(traces, traces[0], rtol=1e-12)


def test_rank_is_total_factor_count():
    rng = np.random.default_rng(6)
    loadings = [rng.standard_normal((5, 2)) for _ in range(3)]
    est = cov_estimate_from_blocks(loadings, [np.zeros(5)] * 3, 0.6)
    s = np.linalg.svd(materialize_covariance(est), compute_uv=False)
    assert np.sum(s > 1e-8 * s[0]) == 6


def test_cross_covariance_matches_monte_carlo():
    rng = np.random.default_rng(7)
    loadings = [rng.standard_normal((3, 2)), rng.standard_normal((2, 2))]
    noise = [np.full(3, 0.4), np.full(2, 0.7)]
    rho = 0.6
    y = sample_coupled(loadings, noise, rho, 200_000, seed=8)
    cross = y[:, :3] - y[:, :3].mean(axis=0), y[:, 3:] - y[:, 3:].mean(axis=0)
    prods = cross[0][:, :, None] * cross[1][:, None, :]
    se = prods.std(axis=0, ddof=1) / np.sqrt(y.shape[0])
    z = np.abs(prods.mean(axis=0) - rho * loadings[0] @ loadings[1].T) / se
    assert z.max() <= 4.0
    assert cov_within(y, dense_sigma(loadings, noise, rho), 4.0) <= 4.0


# --- persistence ------------------------------------------------------------

def test_json_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    part = make_partition(8, 3, seed=1)
    loadings, noise, rho = random_estimate(rng, g=3, sizes=part.sizes)
    est = cov_estimate_from_blocks(loadings, noise, rho, part)
    path = tmp_path / "est.json"
    path.write_text(est.to_json())
    back = CovEstimate.load(path)
    np.testing.assert_array_equal(materialize_covariance(back), materialize_covariance(est))
    assert set(json.loads(path.read_text())) == {"g", "k_g", "rho", "columns", "loadings", "noise"}


def test_json_rejects_wrong_group_count():
    est = cov_estimate_from_blocks([np.ones((2, 1))], [np.ones(2)], 0.5)
    data = est.to_dict()
    data["g"] = 2
    with pytest.raises(ValueError):
        CovEstimate.from_dict(data)


def test_covariance_csv(tmp_path):
    rng = np.random.default_rng(10)
    loadings, noise, rho = random_estimate(rng, g=2, sizes=[3, 3])
    est = cov_estimate_from_blocks(loadings, noise, rho)
    write_covariance_csv(est, tmp_path / "s.csv", block_rows=2)
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "s.csv", delimiter=","), materialize_covariance(est))
