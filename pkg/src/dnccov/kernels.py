"""Full-conditional updates for the coupled group samplers.

One sweep runs, in order:

1. shared factors X from the summed group summaries (coordinator),
2. per group: idiosyncratic factors Z, recomposed eta, loadings rows,
   local precisions phi, column multipliers delta (and tau), noise variances,
3. rho on its grid from the summed per-group log-likelihood vectors
   (coordinator).

Each group also emits a :class:`WorkerSummary` at the end of its local
update.  The summary carries everything the coordinator needs for the rho
draw of this sweep and the X draw of the next one, so a sweep costs a single
up/down message exchange.

Group noise precision ``Omega^{-1}`` is diagonal, so every ``Lambda^T
Omega^{-1} (.)`` product is an elementwise scaling followed by a
``k_g``-wide matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .mgps import update_delta, update_phi
from .model import FactorState, MgpsHyperparams, MgpsState, compose_eta
from .rng import COORDINATOR, as_generator, stream


class NonPositiveDefiniteError(np.linalg.LinAlgError):
    """A posterior precision failed its Cholesky factorization."""


@dataclass(frozen=True)
class WorkerSummary:
    """What one group sends to the coordinator after its local update.

    Attributes
    ----------
    precision_contribution : np.ndarray, shape (k, k)
        ``Lambda^T Omega^{-1} Lambda``.
    data_projection : np.ndarray, shape (n, k)
        Row i is ``Lambda^T Omega^{-1} y_i``.
    idio_projection : np.ndarray, shape (n, k)
        Row i is ``Lambda^T Omega^{-1} Lambda Z_i``.
    rho_loglik : np.ndarray or None
        Log-likelihood of the group data at each rho grid value.
    """

    group: int
    sweep: int
    precision_contribution: np.ndarray
    data_projection: np.ndarray
    idio_projection: np.ndarray
    rho_loglik: np.ndarray | None = None

    def mean_contributions(self, rho: float) -> np.ndarray:
        """Row i is ``Lambda^T Omega^{-1} (y_i - sqrt(1 - rho) Lambda Z_i)``."""
        return self.data_projection - np.sqrt(1.0 - rho) * self.idio_projection


def _loglik_grid(weighted_ss, log_norm, data_proj, precision, shared, idio, grid):
    # Expands sum_ij (y_ij - [L(a X_i + b Z_i)]_j)^2 / s_j in k x k terms.
    xp = shared @ precision
    c_ya = np.sum(shared * data_proj)
    c_yb = np.sum(idio * data_proj)
    c_aa = np.sum(xp * shared)
    c_ab = np.sum(xp * idio)
    c_bb = np.sum((idio @ precision) * idio)
    a = np.sqrt(grid)
    b = np.sqrt(1.0 - grid)
    quad = weighted_ss - 2.0 * (a * c_ya + b * c_yb) + grid * c_aa + (1.0 - grid) * c_bb + 2.0 * a * b * c_ab
    return log_norm - 0.5 * quad


def worker_summarize_for_shared(
    data: np.ndarray,
    state: FactorState,
    idio: np.ndarray,
    shared: np.ndarray | None = None,
    rho_grid: np.ndarray | None = None,
    *,
    group: int = 0,
    sweep: int = 0,
    col_sq: np.ndarray | None = None,
) -> WorkerSummary:
    """Additive contributions of one group to the X and rho updates.

    The rho log-likelihood vector is only filled in when both ``shared`` and
    ``rho_grid`` are given.  ``col_sq`` (column sums of ``data**2``) may be
    passed in to avoid recomputing it every sweep.
    """
    lam, noise = state.loadings, state.noise_variances
    if data.shape[1] != lam.shape[0] or idio.shape != (data.shape[0], lam.shape[1]):
        raise ValueError("data, loadings and idiosyncratic factors have inconsistent shapes")
    weighted = lam / noise[:, None]
    precision = lam.T @ weighted
    precision = 0.5 * (precision + precision.T)
    data_proj = data @ weighted
    summary_ll = None
    if shared is not None and rho_grid is not None:
        if col_sq is None:
            col_sq = np.einsum("ij,ij->j", data, data)
        n = data.shape[0]
        log_norm = -0.5 * n * np.sum(np.log(2.0 * np.pi * noise))
        summary_ll = _loglik_grid(col_sq @ (1.0 / noise), log_norm, data_proj, precision,
                                  shared, idio, np.asarray(rho_grid, dtype=float))
    return WorkerSummary(group, sweep, precision, data_proj, idio @ precision, summary_ll)


def worker_rho_loglik(data, loadings, noise, shared, idio, rho_grid) -> np.ndarray:
    """Group log-likelihood ``sum_i log N(y_i; L eta_i(rho), Omega)`` for each grid rho."""
    state = FactorState(np.asarray(loadings, float), np.asarray(noise, float), MgpsState.initial(1, 1))
    return worker_summarize_for_shared(data, state, idio, shared, rho_grid).rho_loglik


def _cholesky(precision: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(precision, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefiniteError(f"{what} posterior precision is not positive definite") from exc


def _gaussian_rows(precision: np.ndarray, rhs: np.ndarray, rng: np.random.Generator, what: str) -> np.ndarray:
    """Rows ``r_i ~ N(precision^{-1} rhs_i, precision^{-1})`` for a shared precision."""
    chol = _cholesky(precision, what)
    w = linalg.solve_triangular(chol, rhs.T, lower=True)
    w += rng.standard_normal(w.shape)
    return linalg.solve_triangular(chol, w, lower=True, trans="T").T


def sample_shared_factors(summaries, rho: float, seed=None) -> np.ndarray:
    """Draw X (n x k): X_i ~ N(S^{-1} sqrt(rho) b_i, S^{-1}).

    ``S = rho * sum_m P_m + I`` and ``b_i`` sums the groups' mean
    contributions at ``rho``.
    """
    summaries = list(summaries)
    if not summaries:
        raise ValueError("need at least one worker summary")
    shapes = {s.data_projection.shape for s in summaries}
    if len(shapes) != 1:
        raise ValueError(f"worker summaries disagree on (n, k): {sorted(shapes)}")
    rng = as_generator(seed)
    k = summaries[0].precision_contribution.shape[0]
    total_precision = sum(s.precision_contribution for s in summaries)
    total_mean = sum(s.mean_contributions(rho) for s in summaries)
    precision = rho * total_precision + np.eye(k)
    return _gaussian_rows(precision, np.sqrt(rho) * total_mean, rng, "shared factor")


def _sample_idio_from_summary(summary: WorkerSummary, shared: np.ndarray, rho: float, rng) -> np.ndarray:
    precision = summary.precision_contribution
    # Lambda^T Omega^{-1} (y_i - sqrt(rho) Lambda X_i)
    rhs = summary.data_projection - np.sqrt(rho) * (shared @ precision)
    k = precision.shape[0]
    return _gaussian_rows((1.0 - rho) * precision + np.eye(k), np.sqrt(1.0 - rho) * rhs, rng, "idiosyncratic factor")


def sample_idiosyncratic_factors(data, state: FactorState, shared, rho: float, seed=None) -> np.ndarray:
    """Draw Z (n x k) for one group given the shared factors."""
    if shared.shape != (data.shape[0], state.k):
        raise ValueError("shared factors must be n x k_g")
    summary = worker_summarize_for_shared(data, state, np.zeros_like(shared))
    return _sample_idio_from_summary(summary, shared, rho, as_generator(seed))


def sample_loadings_rows(data, eta, noise, mgps: MgpsState, seed=None) -> np.ndarray:
    """Draw every loadings row from its conjugate Gaussian conditional.

    Row j has precision ``diag(phi_j * tau) + eta^T eta / s_j`` and mean
    ``precision^{-1} eta^T y_j / s_j``.  The Gram matrix is formed once.
    """
    n, p = data.shape
    if eta.shape[0] != n or noise.shape != (p,) or mgps.phi.shape != (p, eta.shape[1]):
        raise ValueError("data, eta, noise and phi have inconsistent shapes")
    rng = as_generator(seed)
    k = eta.shape[1]
    inv_noise = 1.0 / noise
    gram = eta.T @ eta
    precision = gram[None, :, :] * inv_noise[:, None, None]
    diag = np.arange(k)
    precision[:, diag, diag] += mgps.prior_precision()
    try:
        chol = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefiniteError("loadings posterior precision is not positive definite") from exc
    rhs = (data.T @ eta) * inv_noise[:, None]
    w = np.linalg.solve(chol, rhs[:, :, None])
    w += rng.standard_normal(w.shape)
    return np.linalg.solve(np.swapaxes(chol, 1, 2), w)[:, :, 0]


def sample_noise_variances(data, loadings, eta, a_sigma: float, b_sigma: float, seed=None) -> np.ndarray:
    """sigma_j^{-2} ~ Gamma(a_sigma + n/2, b_sigma + RSS_j / 2) (shape-rate)."""
    rng = as_generator(seed)
    resid = data - eta @ loadings.T
    rss = np.einsum("ij,ij->j", resid, resid)
    precision = rng.gamma(a_sigma + 0.5 * data.shape[0], 1.0 / (b_sigma + 0.5 * rss))
    return 1.0 / precision


def sample_rho_index(loglik, seed=None) -> int:
    """Grid index drawn with probability proportional to ``exp(loglik)``."""
    loglik = np.asarray(loglik, dtype=float)
    if loglik.ndim != 1 or loglik.size == 0:
        raise ValueError("log-likelihood must be a non-empty vector")
    if np.any(np.isnan(loglik)) or np.any(loglik == np.inf):
        raise ValueError("log-likelihood vector contains NaN or +inf")
    top = loglik.max()
    if top == -np.inf:
        raise ValueError("every rho grid value has zero likelihood")
    weights = np.cumsum(np.exp(loglik - top))
    u = as_generator(seed).random() * weights[-1]
    return int(min(np.searchsorted(weights, u, side="right"), loglik.size - 1))


def sample_rho(loglik, grid, seed=None) -> float:
    """Grid Gibbs step for rho under a discrete uniform prior."""
    grid = np.asarray(grid, dtype=float)
    if grid.shape != np.shape(loglik):
        raise ValueError("grid and log-likelihood vector differ in length")
    return float(grid[sample_rho_index(loglik, seed)])


@dataclass
class GroupStreams:
    idiosyncratic: np.random.Generator
    loadings: np.random.Generator
    phi: np.random.Generator
    delta: np.random.Generator
    noise: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, group: int) -> "GroupStreams":
        return cls(*(stream(seed, group, fam) for fam in ("idiosyncratic", "loadings", "phi", "delta", "noise")))


@dataclass
class GroupState:
    """Everything one worker owns for group ``index``."""

    index: int
    data: np.ndarray
    factors: FactorState
    idio: np.ndarray
    streams: GroupStreams
    col_sq: np.ndarray

    @classmethod
    def create(cls, index: int, data: np.ndarray, factors: FactorState, idio: np.ndarray, seed: int) -> "GroupState":
        data = np.ascontiguousarray(data)
        return cls(index, data, factors, idio, GroupStreams.from_seed(seed, index),
                   np.einsum("ij,ij->j", data, data))

    def summarize(self, shared, rho_grid, sweep: int) -> WorkerSummary:
        return worker_summarize_for_shared(self.data, self.factors, self.idio, shared, rho_grid,
                                           group=self.index, sweep=sweep, col_sq=self.col_sq)


def group_local_update(group: GroupState, summary: WorkerSummary, shared: np.ndarray, rho: float,
                       rho_grid: np.ndarray, sweep: int) -> tuple[GroupState, WorkerSummary]:
    """Worker half of a sweep: Z, eta, loadings, phi, delta/tau, noise, then a fresh summary.

    ``summary`` must be the group's summary of its current state (it supplies
    the projections the Z draw needs).
    """
    if summary.group != group.index:
        raise ValueError(f"summary for group {summary.group} given to group {group.index}")
    streams = group.streams
    hyper = group.factors.mgps.hyper
    idio = _sample_idio_from_summary(summary, shared, rho, streams.idiosyncratic)
    eta = compose_eta(shared, idio, rho)
    loadings = sample_loadings_rows(group.data, eta, group.factors.noise_variances, group.factors.mgps,
                                    streams.loadings)
    mgps = update_phi(group.factors.mgps, loadings, streams.phi)
    mgps = update_delta(mgps, loadings, seed=streams.delta)
    noise = sample_noise_variances(group.data, loadings, eta, hyper.a_sigma, hyper.b_sigma, streams.noise)
    updated = replace(group, factors=FactorState(loadings, noise, mgps), idio=idio)
    return updated, updated.summarize(shared, rho_grid, sweep)


@dataclass
class CoordinatorStreams:
    shared: np.random.Generator
    rho: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "CoordinatorStreams":
        return cls(stream(seed, COORDINATOR, "shared"), stream(seed, COORDINATOR, "rho"))


@dataclass
class CoupledState:
    """State of all groups plus the coordinator after ``sweep`` sweeps.

    ``summaries[m]`` is always stamped with ``sweep``; the next X draw refuses
    summaries from any other sweep.
    """

    groups: list[GroupState]
    shared: np.ndarray
    rho: float
    rho_grid: np.ndarray
    summaries: list[WorkerSummary]
    sweep: int
    streams: CoordinatorStreams
    rho_fixed: bool = False


def check_barrier(summaries, sweep: int) -> None:
    stale = [(s.group, s.sweep) for s in summaries if s.sweep != sweep]
    if stale:
        raise RuntimeError(f"summaries from the wrong sweep (expected {sweep}): {stale}")


def coordinator_rho(summaries, state_rho: float, rho_grid, rng, fixed: bool) -> float:
    if fixed:
        return state_rho
    return sample_rho(sum(s.rho_loglik for s in summaries), rho_grid, rng)


def full_sweep(state: CoupledState) -> CoupledState:
    """One coupled Gibbs sweep over every group, run in-process."""
    check_barrier(state.summaries, state.sweep)
    sweep = state.sweep + 1
    shared = sample_shared_factors(state.summaries, state.rho, state.streams.shared)
    groups, summaries = [], []
    for group, summary in zip(state.groups, state.summaries):
        new_group, new_summary = group_local_update(group, summary, shared, state.rho, state.rho_grid, sweep)
        groups.append(new_group)
        summaries.append(new_summary)
    rho = coordinator_rho(summaries, state.rho, state.rho_grid, state.streams.rho, state.rho_fixed)
    return CoupledState(groups, shared, rho, state.rho_grid, summaries, sweep, state.streams, state.rho_fixed)


def _factor_state_from_loadings(data: np.ndarray, loadings: np.ndarray, hyper: MgpsHyperparams) -> FactorState:
    # Unexplained column variance, floored at a tenth of the column variance.
    n, p = data.shape
    var = np.einsum("ij,ij->j", data, data) / n
    var = np.where(var > 0, var, 1.0)
    noise = np.maximum(var - np.sum(loadings**2, axis=1), 0.1 * var)
    return FactorState(loadings, noise, MgpsState.initial(p, loadings.shape[1], hyper))


def initial_factor_state(data: np.ndarray, k: int, hyper: MgpsHyperparams) -> FactorState:
    """Principal-component start for a single block: top-k right singular vectors."""
    n, p = data.shape
    _, s, vt = np.linalg.svd(data, full_matrices=False)
    r = min(k, s.size)
    loadings = np.zeros((p, k))
    loadings[:, :r] = vt[:r].T * (s[:r] / np.sqrt(n))
    return _factor_state_from_loadings(data, loadings, hyper)


def joint_scores(group_data, k: int) -> np.ndarray:
    """Leading ``k`` left singular vectors of the column-concatenated data (n x k).

    Computed from ``sum_m Y_m Y_m^T`` when ``n <= p`` (each group adds its own
    term) and from ``Y^T Y`` otherwise, so nothing larger than the data is formed.
    """
    n = group_data[0].shape[0]
    p = sum(block.shape[1] for block in group_data)
    r = min(k, n, p)
    if n <= p:
        gram = sum(block @ block.T for block in group_data)
        vals, vecs = np.linalg.eigh(gram)
        u = vecs[:, ::-1][:, :r]
    else:
        full = np.hstack(group_data)
        vals, vecs = np.linalg.eigh(full.T @ full)
        v = vecs[:, ::-1][:, :r]
        s = np.sqrt(np.maximum(vals[::-1][:r], 0.0))
        u = (full @ v) / np.where(s > 0, s, 1.0)
    out = np.zeros((n, k))
    out[:, :r] = u
    # fix the sign convention so the start does not depend on the solver
    flip = np.sign(out[np.argmax(np.abs(out), axis=0), np.arange(k)])
    return out * np.where(flip == 0, 1.0, flip)


def init_coupled_state(group_data, k: int, hyper: MgpsHyperparams, seed: int, rho_grid: np.ndarray,
                       rho: float, rho_fixed: bool = False) -> CoupledState:
    """Build the sweep-0 state from a joint principal-component start.

    All groups share the leading scores ``U`` of the full data: ``X = sqrt(n) U``
    and ``Lambda_m = Y_m^T U / sqrt(n)``, so every group starts with the same
    factor orientation.  Z starts at zero.
    """
    rho_grid = np.asarray(rho_grid, dtype=float)
    idx = int(np.argmin(np.abs(rho_grid - rho)))
    if rho_fixed and abs(rho_grid[idx] - rho) > 1e-12:
        raise ValueError(f"fixed rho={rho} is not on the grid")
    rho = float(rho_grid[idx])
    n = group_data[0].shape[0]
    scores = joint_scores(group_data, k)
    groups = []
    for m, block in enumerate(group_data):
        factors = _factor_state_from_loadings(block, block.T @ scores / np.sqrt(n), hyper)
        groups.append(GroupState.create(m, block, factors, np.zeros((n, k)), seed))
    shared = np.sqrt(n) * scores
    summaries = [grp.summarize(shared, rho_grid, 0) for grp in groups]
    return CoupledState(groups, shared, rho, rho_grid, summaries, 0, CoordinatorStreams.from_seed(seed), rho_fixed)
