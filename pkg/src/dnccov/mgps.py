"""Multiplicative gamma process shrinkage prior.

    lambda_jh | phi_jh, tau_h ~ N(0, 1 / (phi_jh tau_h))
    phi_jh ~ Gamma(nu/2, nu/2),   tau_h = delta_1 * ... * delta_h
    delta_1 ~ Gamma(a1, 1),       delta_l ~ Gamma(a2, 1)  (l >= 2)

Gamma distributions are shape-rate throughout; numpy's ``gamma`` takes a
scale, so every call below passes ``1 / rate``.
"""

from __future__ import annotations

import csv
import math
from typing import Sequence

import numpy as np

from .model import MgpsHyperparams, MgpsState
from .rng import as_generator


def sample_prior_loadings(p: int, k: int, hyper: MgpsHyperparams | None = None, seed=None):
    """Draw a p x k loadings matrix and its shrinkage state from the prior.

    Returns
    -------
    loadings : np.ndarray, shape (p, k)
    state : MgpsState
    """
    if p < 1 or k < 1:
        raise ValueError(f"p and k must be positive, got p={p}, k={k}")
    hyper = hyper or MgpsHyperparams()
    rng = as_generator(seed)
    phi = rng.gamma(hyper.nu / 2, 2.0 / hyper.nu, size=(p, k))
    delta = np.empty(k)
    delta[0] = rng.gamma(hyper.a1, 1.0)
    delta[1:] = rng.gamma(hyper.a2, 1.0, size=k - 1)
    state = MgpsState(phi, delta, np.cumprod(delta), hyper)
    loadings = rng.standard_normal((p, k)) / np.sqrt(state.prior_precision())
    return loadings, state


def update_phi(state: MgpsState, loadings: np.ndarray, seed=None) -> MgpsState:
    """Redraw local precisions: phi_jh ~ Gamma(nu/2 + 1, (nu + tau_h lambda_jh^2) / 2)."""
    if loadings.shape != state.phi.shape:
        raise ValueError(f"loadings shape {loadings.shape} != phi shape {state.phi.shape}")
    rng = as_generator(seed)
    nu = state.hyper.nu
    rate = 0.5 * (nu + state.tau * loadings**2)
    phi = rng.gamma(nu / 2 + 1.0, 1.0 / rate)
    return MgpsState(phi, state.delta, state.tau, state.hyper)


def delta_conditional(delta: np.ndarray, h: int, weighted_sq: np.ndarray, p: int, hyper: MgpsHyperparams):
    """Shape and rate of delta_h given everything else (0-based ``h``).

    ``weighted_sq[l] = sum_j phi_jl lambda_jl^2``.
    """
    k = delta.size
    tau_wo = np.cumprod(np.where(np.arange(k) == h, 1.0, delta))
    shape = (hyper.a1 if h == 0 else hyper.a2) + 0.5 * p * (k - h)
    rate = 1.0 + 0.5 * float(tau_wo[h:] @ weighted_sq[h:])
    return shape, rate


def update_delta(state: MgpsState, loadings: np.ndarray, phi: np.ndarray | None = None, seed=None) -> MgpsState:
    """Sequentially redraw delta_1, ..., delta_k; tau is recomputed afterwards."""
    phi = state.phi if phi is None else phi
    if loadings.shape != phi.shape:
        raise ValueError(f"loadings shape {loadings.shape} != phi shape {phi.shape}")
    rng = as_generator(seed)
    p = loadings.shape[0]
    weighted_sq = np.einsum("jh,jh->h", phi, loadings**2)
    delta = state.delta.copy()
    for h in range(delta.size):
        shape, rate = delta_conditional(delta, h, weighted_sq, p, state.hyper)
        delta[h] = rng.gamma(shape, 1.0 / rate)
    return MgpsState(phi, delta, np.cumprod(delta), state.hyper)


def sparse_truth(p: int, k: int, s: int, rng: np.random.Generator, low: float = 0.1, high: float = 3.0) -> np.ndarray:
    """p x k matrix whose columns each hold exactly ``s`` Uniform(low, high) entries."""
    if not 1 <= s <= p:
        raise ValueError(f"need 1 <= s <= p, got s={s}, p={p}")
    out = np.zeros((p, k))
    for h in range(k):
        rows = rng.choice(p, size=s, replace=False)
        out[rows, h] = rng.uniform(low, high, size=s)
    return out


def trace_concentration_experiment(
    p: int,
    k: int,
    s: int,
    hyper: MgpsHyperparams | None,
    epsilons: Sequence[float],
    n_draws: int,
    seed=None,
    groups: int = 1,
    chunk: int = 4096,
) -> list[dict]:
    """Monte Carlo estimate of P(|trace(D E D^T) - trace(L0 L0^T)| < eps).

    ``L0`` is a sparse truth with ``s`` nonzeros per column.  Each prior draw
    splits the rows into ``groups`` blocks with ``k // groups`` columns each;
    since ``E`` has identity diagonal blocks the trace is the summed squared
    Frobenius norm of the blocks.

    Returns
    -------
    list of dict
        One ``{"epsilon", "probability", "mc_stderr"}`` row per epsilon.
    """
    if not 1 <= s <= p or 2 * s > p:
        raise ValueError(f"sparsity must satisfy 1 <= s <= p and s/p <= 1/2, got s={s}, p={p}")
    if groups < 1 or k % groups or groups > p:
        raise ValueError(f"groups={groups} must divide k={k} and not exceed p={p}")
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    hyper = hyper or MgpsHyperparams()
    rng = as_generator(seed)
    truth = sparse_truth(p, k, s, rng)
    target = float(np.sum(truth**2))
    k_g = k // groups
    base, extra = divmod(p, groups)
    sizes = [base + 1 if m < extra else base for m in range(groups)]

    deviations = np.empty(n_draws)
    done = 0
    while done < n_draws:
        b = min(chunk, n_draws - done)
        total = np.zeros(b)
        for size in sizes:
            phi = rng.gamma(hyper.nu / 2, 2.0 / hyper.nu, size=(b, size, k_g))
            delta = np.concatenate(
                [rng.gamma(hyper.a1, 1.0, size=(b, 1)), rng.gamma(hyper.a2, 1.0, size=(b, k_g - 1))], axis=1
            )
            tau = np.cumprod(delta, axis=1)
            lam = rng.standard_normal((b, size, k_g)) / np.sqrt(phi * tau[:, None, :])
            total += np.sum(lam**2, axis=(1, 2))
        deviations[done:done + b] = np.abs(total - target)
        done += b

    rows = []
    for eps in epsilons:
        prob = float(np.mean(deviations < eps))
        rows.append({"epsilon": float(eps), "probability": prob,
                     "mc_stderr": math.sqrt(prob * (1 - prob) / n_draws)})
    return rows


TRACE_CSV_COLUMNS = ("epsilon", "probability", "mc_stderr")


def write_trace_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: repr(row[key]) for key in TRACE_CSV_COLUMNS})
