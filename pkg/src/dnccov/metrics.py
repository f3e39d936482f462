"""Accuracy measures and network export for covariance estimates.

Functions accept dense arrays or :class:`~dnccov.model.CovEstimate`; the
latter is never densified for the iterative routines.
"""

from __future__ import annotations

import csv
from typing import TextIO

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from .model import CovEstimate, materialize_covariance

DENSE_LIMIT = 64


def _shape(a) -> int:
    if isinstance(a, CovEstimate):
        return a.p
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a.shape[0]


def _matvec(a):
    if isinstance(a, CovEstimate):
        return a.matvec
    a = np.asarray(a, dtype=float)
    return lambda v: a @ v


def _dense(a) -> np.ndarray:
    return materialize_covariance(a) if isinstance(a, CovEstimate) else np.asarray(a, dtype=float)


def _start_vector(p: int) -> np.ndarray:
    return np.random.default_rng(p).standard_normal(p)


def operator_norm_error(estimate, truth, tol: float = 1e-6) -> float:
    """Spectral norm of ``estimate - truth`` for symmetric arguments.

    Uses Lanczos (ARPACK) on the difference operator; small matrices go
    through a dense eigensolver instead.
    """
    p = _shape(estimate)
    if _shape(truth) != p:
        raise ValueError(f"dimension mismatch: {p} vs {_shape(truth)}")
    if p <= DENSE_LIMIT:
        diff = _dense(estimate) - _dense(truth)
        return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (diff + diff.T)))))
    fa, fb = _matvec(estimate), _matvec(truth)
    op = LinearOperator((p, p), matvec=lambda v: fa(v) - fb(v), dtype=float)
    vals = eigsh(op, k=1, which="LM", tol=tol, v0=_start_vector(p), return_eigenvectors=False)
    return float(np.abs(vals[0]))


def error_summaries(estimate, truth) -> dict:
    """Entrywise mean squared error, mean and max absolute error (unscaled)."""
    a, b = _dense(estimate), _dense(truth)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    return {"mse": float(np.mean(diff**2)), "avg_abs_bias": float(diff.mean()), "max_abs_bias": float(diff.max())}


def leading_eigenvalues(est, count: int) -> np.ndarray:
    """The ``count`` largest eigenvalues, in non-increasing order."""
    p = _shape(est)
    if not 1 <= count <= p:
        raise ValueError(f"count must lie in 1..{p}, got {count}")
    if p <= max(DENSE_LIMIT, 2 * count + 1):
        vals = np.linalg.eigvalsh(_dense(est))[::-1][:count]
    else:
        op = LinearOperator((p, p), matvec=_matvec(est), dtype=float)
        vals = np.sort(eigsh(op, k=count, which="LA", tol=1e-10, v0=_start_vector(p),
                             return_eigenvectors=False))[::-1]
    return vals


def _row_blocks(est, block_rows: int):
    if isinstance(est, CovEstimate):
        yield from est.iter_row_blocks(block_rows)
    else:
        a = np.asarray(est, dtype=float)
        for start in range(0, a.shape[0], block_rows):
            yield start, a[start:start + block_rows]


def threshold_adjacency(est, threshold: float, sink: TextIO | None = None, block_rows: int = 512) -> int:
    """Write ``(i, j, correlation)`` for every ``i < j`` with ``|corr| >= threshold``.

    Rows of the implied correlation matrix are produced block by block.
    Indices are 0-based original column indices.  Returns the edge count.
    """
    if not 0 < threshold:
        raise ValueError(f"threshold must be positive, got {threshold}")
    diag = est.diagonal() if isinstance(est, CovEstimate) else np.diag(np.asarray(est, dtype=float)).copy()
    if np.any(diag <= 0):
        bad = int(np.flatnonzero(diag <= 0)[0])
        raise ValueError(f"column {bad} has zero variance; correlation undefined")
    scale = 1.0 / np.sqrt(diag)
    writer = csv.writer(sink) if sink is not None else None
    if writer is not None:
        writer.writerow(["i", "j", "correlation"])
    edges = 0
    for start, block in _row_blocks(est, block_rows):
        rows = np.arange(start, start + block.shape[0])
        corr = block * scale[rows, None] * scale[None, :]
        hit = (np.abs(corr) >= threshold) & (np.arange(corr.shape[1])[None, :] > rows[:, None])
        ii, jj = np.nonzero(hit)
        edges += ii.size
        if writer is not None:
            for i, j in zip(ii, jj):
                writer.writerow([int(rows[i]), int(j), repr(float(corr[i, j]))])
    return int(edges)
