"""Core domain types for the divide-and-conquer factor model.

The observed n x p matrix is split column-wise into ``g`` groups.  Group ``m``
carries its own loadings ``L[m]`` (p_m x k_g) and noise variances, while the
latent factors of all groups are tied through

    eta_i[m] = sqrt(rho) * X_i + sqrt(1 - rho) * Z_i[m]

so that the implied global covariance is ``D E D^T + Omega`` with ``D`` the
block-diagonal loadings and ``E`` carrying identity diagonal blocks and
``rho * I`` off-diagonal blocks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class DataMatrix:
    """Column-centred observations.

    Attributes
    ----------
    values : np.ndarray, shape (n, p)
        Centred data.
    column_means : np.ndarray, shape (p,)
        Means removed at centring time.
    """

    values: np.ndarray
    column_means: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def center_columns(raw) -> DataMatrix:
    """Subtract column means and record them.

    Raises
    ------
    ValueError
        If ``raw`` has fewer than two rows or contains a non-finite entry
        (the first offending row/column is named).
    """
    values = np.array(raw, dtype=float, copy=True)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got {values.ndim} dimensions")
    if values.shape[0] < 2:
        raise ValueError(f"need at least 2 rows, got {values.shape[0]}")
    if values.shape[1] < 1:
        raise ValueError("need at least 1 column")
    bad = ~np.isfinite(values)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"non-finite entry {values[i, j]!r} at row {i}, column {j}")
    means = values.mean(axis=0)
    values -= means
    return DataMatrix(values=values, column_means=means)


@dataclass(frozen=True)
class Partition:
    """Disjoint split of the columns ``0..p-1`` into ``g`` groups.

    Column indices are 0-based and sorted within each group.
    """

    p: int
    groups: tuple[np.ndarray, ...]
    seed: int | None = None

    def __post_init__(self):
        if len(self.groups) < 1:
            raise ValueError("partition needs at least one group")
        joined = np.concatenate(self.groups)
        if joined.size != self.p or not np.array_equal(np.sort(joined), np.arange(self.p)):
            raise ValueError("groups must be a disjoint cover of 0..p-1")

    @property
    def g(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> list[int]:
        return [int(idx.size) for idx in self.groups]

    @classmethod
    def contiguous(cls, p: int, g: int) -> "Partition":
        """Identity partition: consecutive blocks, larger blocks first."""
        _check_group_count(p, g)
        bounds = np.cumsum([0] + _group_sizes(p, g))
        return cls(p, tuple(np.arange(bounds[m], bounds[m + 1]) for m in range(g)))

    def group_of(self) -> np.ndarray:
        """Length-p array mapping each column to its group id."""
        out = np.empty(self.p, dtype=np.int64)
        for m, idx in enumerate(self.groups):
            out[idx] = m
        return out


def _check_group_count(p: int, g: int) -> None:
    if p < 1:
        raise ValueError(f"p must be positive, got {p}")
    if g < 1 or g > p:
        raise ValueError(f"group count must satisfy 1 <= g <= p, got g={g}, p={p}")


def _group_sizes(p: int, g: int) -> list[int]:
    base, extra = divmod(p, g)
    return [base + 1 if m < extra else base for m in range(g)]


def make_partition(p: int, g: int, seed=None) -> Partition:
    """Random partition of ``p`` columns into ``g`` groups of size floor/ceil(p/g).

    ``seed`` may be an int, a ``SeedSequence`` or ``None``; the same seed gives
    the same partition.
    """
    _check_group_count(p, g)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(p)
    bounds = np.cumsum([0] + _group_sizes(p, g))
    groups = tuple(np.sort(perm[bounds[m]:bounds[m + 1]]) for m in range(g))
    stored = seed if isinstance(seed, (int, np.integer)) else None
    return Partition(p, groups, stored)


@dataclass(frozen=True)
class MgpsHyperparams:
    """Hyperparameters of the multiplicative gamma process shrinkage prior.

    All Gamma distributions use the shape-rate convention.
    """

    nu: float = 3.0
    a1: float = 2.1
    a2: float = 3.1
    a_sigma: float = 1.0
    b_sigma: float = 0.3

    def __post_init__(self):
        for name in ("nu", "a1", "a2", "a_sigma", "b_sigma"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"hyperparameter {name} must be positive, got {value}")
        if self.a2 <= 1:
            raise ValueError(
                f"a2 must exceed 1 so that column precisions increase stochastically, got {self.a2}"
            )


@dataclass(frozen=True)
class MgpsState:
    """Local (``phi``) and column-wise (``delta``, ``tau``) shrinkage state.

    ``tau`` is always ``cumprod(delta)``; use :meth:`with_delta` to keep it so.
    """

    phi: np.ndarray
    delta: np.ndarray
    tau: np.ndarray
    hyper: MgpsHyperparams = field(default_factory=MgpsHyperparams)

    @classmethod
    def initial(cls, p: int, k: int, hyper: MgpsHyperparams | None = None) -> "MgpsState":
        delta = np.ones(k)
        return cls(np.ones((p, k)), delta, np.cumprod(delta), hyper or MgpsHyperparams())

    def with_delta(self, delta: np.ndarray) -> "MgpsState":
        return MgpsState(self.phi, delta, np.cumprod(delta), self.hyper)

    def prior_precision(self) -> np.ndarray:
        """Row-wise prior precisions ``phi[j, h] * tau[h]``."""
        return self.phi * self.tau


@dataclass(frozen=True)
class FactorState:
    """Parameters owned by one group: loadings, noise variances, prior state."""

    loadings: np.ndarray
    noise_variances: np.ndarray
    mgps: MgpsState

    @property
    def k(self) -> int:
        return self.loadings.shape[1]


@dataclass(frozen=True)
class SharedLatentState:
    """Shared factors ``X``, per-group idiosyncratic factors ``Z`` and ``rho``."""

    shared: np.ndarray
    idiosyncratic: tuple[np.ndarray, ...]
    rho: float
    rho_grid: np.ndarray

    def __post_init__(self):
        if not np.any(np.isclose(self.rho_grid, self.rho, rtol=0, atol=1e-12)):
            raise ValueError(f"rho={self.rho} is not an element of the rho grid")

    def eta(self, m: int) -> np.ndarray:
        return compose_eta(self.shared, self.idiosyncratic[m], self.rho)


def compose_eta(shared: np.ndarray, idio: np.ndarray, rho: float) -> np.ndarray:
    """Group factors ``sqrt(rho) X + sqrt(1 - rho) Z``."""
    return np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * idio


def default_rho_grid(size: int = 101) -> np.ndarray:
    """Equally spaced grid on [0, 1]; 101 points gives steps of 0.01."""
    if size < 2:
        raise ValueError(f"rho grid needs at least 2 points, got {size}")
    return np.linspace(0.0, 1.0, size)


@dataclass(frozen=True)
class CovEstimate:
    """Global covariance ``D E D^T + Omega`` held in factored form.

    Attributes
    ----------
    loadings : tuple of np.ndarray
        ``loadings[m]`` has shape (p_m, k_g); its rows belong to the original
        columns ``columns[m]``.
    columns : tuple of np.ndarray
        Original (0-based) column indices of each group.
    noise : np.ndarray, shape (p,)
        Diagonal of ``Omega`` in original column order.
    rho : float
        Cross-group coupling.
    """

    loadings: tuple[np.ndarray, ...]
    columns: tuple[np.ndarray, ...]
    noise: np.ndarray
    rho: float

    def __post_init__(self):
        if len(self.loadings) != len(self.columns) or not self.loadings:
            raise ValueError("need one loadings block per column group")
        ks = {blk.shape[1] for blk in self.loadings}
        if len(ks) != 1:
            raise ValueError(f"all groups must share k_g, got {sorted(ks)}")
        for blk, idx in zip(self.loadings, self.columns):
            if blk.shape[0] != len(idx):
                raise ValueError("loadings rows do not match group column count")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.noise.shape != (self.p,):
            raise ValueError(f"noise must have length p={self.p}")

    @property
    def g(self) -> int:
        return len(self.loadings)

    @property
    def k_g(self) -> int:
        return self.loadings[0].shape[1]

    @property
    def p(self) -> int:
        return sum(len(idx) for idx in self.columns)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Loadings rows in original column order plus each row's group id."""
        rows = np.empty((self.p, self.k_g))
        group = np.empty(self.p, dtype=np.int64)
        for m, (blk, idx) in enumerate(zip(self.loadings, self.columns)):
            rows[idx] = blk
            group[idx] = m
        return rows, group

    def diagonal(self) -> np.ndarray:
        rows, _ = self.stacked()
        return np.einsum("ij,ij->i", rows, rows) + self.noise

    def trace(self) -> float:
        return float(sum(np.sum(blk * blk) for blk in self.loadings) + self.noise.sum())

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """``Sigma_E @ v`` without forming ``Sigma_E``; ``v`` may be (p,) or (p, r)."""
        v = np.asarray(v, dtype=float)
        vec = v.ndim == 1
        V = v[:, None] if vec else v
        proj = [blk.T @ V[idx] for blk, idx in zip(self.loadings, self.columns)]
        total = sum(proj)
        out = self.noise[:, None] * V
        for blk, idx, own in zip(self.loadings, self.columns, proj):
            out[idx] += blk @ (self.rho * total + (1.0 - self.rho) * own)
        return out[:, 0] if vec else out

    def iter_row_blocks(self, block_rows: int = 1024) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(start, rows)`` with ``rows = Sigma_E[start:start + b, :]``."""
        rows, group = self.stacked()
        for start in range(0, self.p, block_rows):
            stop = min(start + block_rows, self.p)
            block = rows[start:stop] @ rows.T
            cross = group[start:stop, None] != group[None, :]
            block[cross] *= self.rho
            block[np.arange(stop - start), np.arange(start, stop)] += self.noise[start:stop]
            yield start, block

    def to_dict(self) -> dict:
        return {
            "g": self.g,
            "k_g": self.k_g,
            "rho": float(self.rho),
            "columns": [idx.tolist() for idx in self.columns],
            "loadings": [blk.tolist() for blk in self.loadings],
            "noise": self.noise.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CovEstimate":
        k_g = int(data["k_g"])
        loadings = tuple(np.array(blk, dtype=float).reshape(-1, k_g) for blk in data["loadings"])
        columns = tuple(np.array(idx, dtype=np.int64) for idx in data["columns"])
        est = cls(loadings, columns, np.array(data["noise"], dtype=float), float(data["rho"]))
        if est.g != int(data["g"]):
            raise ValueError(f"declared g={data['g']} but found {est.g} loadings blocks")
        return est

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def load(cls, path) -> "CovEstimate":
        return cls.from_dict(json.loads(Path(path).read_text()))


def cov_estimate_from_blocks(
    loadings: Sequence[np.ndarray],
    noise: Sequence[np.ndarray],
    rho: float,
    partition: Partition | None = None,
) -> CovEstimate:
    """Assemble a :class:`CovEstimate` from per-group loadings and noise vectors.

    Without a partition the groups are taken as consecutive column blocks.
    """
    loadings = tuple(np.atleast_2d(np.asarray(blk, dtype=float)) for blk in loadings)
    if len({blk.shape[1] for blk in loadings}) != 1:
        raise ValueError("all groups must share k_g")
    sizes = [blk.shape[0] for blk in loadings]
    if partition is None:
        bounds = np.cumsum([0] + sizes)
        columns = tuple(np.arange(bounds[m], bounds[m + 1]) for m in range(len(sizes)))
    else:
        if partition.sizes != sizes:
            raise ValueError(f"partition sizes {partition.sizes} do not match loadings {sizes}")
        columns = partition.groups
    p = sum(sizes)
    full_noise = np.empty(p)
    for idx, sig in zip(columns, noise):
        full_noise[idx] = np.asarray(sig, dtype=float)
    return CovEstimate(loadings, columns, full_noise, float(rho))


def materialize_covariance(est: CovEstimate, block_rows: int = 1024, out=None) -> np.ndarray:
    """Dense ``Sigma_E`` in original column order.

    Rows are produced block by block, so ``out`` may be a memory map when the
    dense matrix does not fit in RAM.
    """
    if out is None:
        out = np.empty((est.p, est.p))
    for start, block in est.iter_row_blocks(block_rows):
        out[start:start + block.shape[0]] = block
    return out


def write_covariance_csv(est: CovEstimate, path, block_rows: int = 512) -> None:
    """Dense, row-major, header-free CSV export streamed by row blocks."""
    with open(path, "w") as fh:
        for _, block in est.iter_row_blocks(block_rows):
            np.savetxt(fh, block, delimiter=",", fmt="%.17g")
