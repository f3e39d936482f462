"""Divide, fit, combine.

``run_estimation`` splits the columns into groups, runs the coupled group
samplers (in-process or across worker processes), accumulates posterior
means on the fly and returns the combined :class:`~dnccov.model.CovEstimate`.

Worker processes exchange one message pair per sweep with the coordinator:
each sends its group summaries (stamped with the sweep index) up, and gets
the next shared factors and the current rho back.  All randomness comes from
named per-group streams, so the result does not depend on the worker count.
"""

from __future__ import annotations

import logging
import math
import multiprocessing as mp
import time
import traceback
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .kernels import CoupledState, GroupState, WorkerSummary
from .model import (
    CovEstimate,
    DataMatrix,
    MgpsHyperparams,
    Partition,
    cov_estimate_from_blocks,
    default_rho_grid,
    make_partition,
    materialize_covariance,
)
from .rng import COORDINATOR, seed_sequence

logger = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    """A conditional draw failed; carries the sweep and group where it happened."""

    def __init__(self, message: str, sweep: int, group: int | None, snapshot: dict | None = None):
        super().__init__(f"sweep {sweep}, group {group}: {message}")
        self.sweep = sweep
        self.group = group
        self.snapshot = snapshot or {}


class BudgetExceeded(RuntimeError):
    """The run passed its wall-clock deadline."""


@dataclass(frozen=True)
class RunConfig:
    """Settings for one estimation run.

    ``k`` is the global factor budget; each group gets ``k_g`` factors,
    ``ceil(k / g)`` unless overridden.  ``rho_fixed`` pins rho to a grid value
    and disables its update.  With a single group rho does not enter the
    estimate, so it is pinned at 1 unless ``rho_fixed`` says otherwise.
    """

    g: int = 1
    k: int = 6
    k_g: int | None = None
    sweep_count: int = 2000
    burn_in: int = 500
    thin: int = 5
    seed: int = 0
    hyper: MgpsHyperparams = field(default_factory=MgpsHyperparams)
    rho_grid_size: int = 101
    rho_init: float = 0.5
    rho_fixed: float | None = None
    estimator: str = "posterior_mean"
    materialize_sigma: bool = False

    def __post_init__(self):
        if self.g < 1:
            raise ValueError(f"g must be at least 1, got {self.g}")
        if self.k < 1 or (self.k_g is not None and self.k_g < 1):
            raise ValueError("factor counts must be positive")
        if self.thin < 1:
            raise ValueError(f"thin must be at least 1, got {self.thin}")
        if not 0 <= self.burn_in < self.sweep_count:
            raise ValueError(f"need 0 <= burn_in < sweep_count, got {self.burn_in} and {self.sweep_count}")
        if self.estimator != "posterior_mean":
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.rho_fixed is not None and not 0 <= self.rho_fixed <= 1:
            raise ValueError("rho_fixed must lie in [0, 1]")
        default_rho_grid(self.rho_grid_size)

    @property
    def factors_per_group(self) -> int:
        return self.k_g if self.k_g is not None else math.ceil(self.k / self.g)

    @property
    def retained_draws(self) -> int:
        return (self.sweep_count - self.burn_in) // self.thin

    @property
    def effective_rho_fixed(self) -> float | None:
        if self.rho_fixed is None and self.g == 1:
            return 1.0
        return self.rho_fixed

    def is_retained(self, sweep: int) -> bool:
        return sweep > self.burn_in and (sweep - self.burn_in) % self.thin == 0

    def rho_grid(self) -> np.ndarray:
        return default_rho_grid(self.rho_grid_size)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["k_g"] = self.factors_per_group
        out["rho_fixed"] = self.effective_rho_fixed
        return out


class PosteriorAccumulator:
    """Running sums of retained draws; no draw of the loadings is stored."""

    def __init__(self, sizes, k: int, expected: int, track_sigma_draws: bool = False,
                 partition: Partition | None = None):
        self.expected = expected
        self.count = 0
        self.loadings = [np.zeros((size, k)) for size in sizes]
        self.loadings_sq = [np.zeros((size, k)) for size in sizes]
        self.noise = [np.zeros(size) for size in sizes]
        self.noise_sq = [np.zeros(size) for size in sizes]
        self.rho_draws: list[float] = []
        self.sigma_sum = None
        self._partition = partition
        if track_sigma_draws:
            p = sum(sizes)
            self.sigma_sum = np.zeros((p, p))

    def add(self, loadings, noise, rho: float) -> None:
        for m, (lam, sig) in enumerate(zip(loadings, noise)):
            self.loadings[m] += lam
            self.loadings_sq[m] += lam * lam
            self.noise[m] += sig
            self.noise_sq[m] += sig * sig
        self.rho_draws.append(float(rho))
        if self.sigma_sum is not None:
            est = cov_estimate_from_blocks(loadings, noise, rho, self._partition)
            self.sigma_sum += materialize_covariance(est)
        self.count += 1

    @property
    def complete(self) -> bool:
        return self.count == self.expected and self.count > 0

    def rho_summary(self) -> dict:
        draws = np.asarray(self.rho_draws)
        if draws.size == 0:
            return {}
        lo, hi = np.quantile(draws, [0.025, 0.975])
        return {"mean": float(draws.mean()), "sd": float(draws.std()), "lower95": float(lo), "upper95": float(hi)}


def combine(acc: PosteriorAccumulator, partition: Partition) -> CovEstimate:
    """Posterior-mean loadings, noise and rho assembled in original column order."""
    if not acc.complete:
        raise ValueError(f"accumulator holds {acc.count} of {acc.expected} expected draws")
    c = float(acc.count)
    loadings = [lam / c for lam in acc.loadings]
    noise = [sig / c for sig in acc.noise]
    rho = float(np.mean(acc.rho_draws))
    return cov_estimate_from_blocks(loadings, noise, min(max(rho, 0.0), 1.0), partition)


# --- worker processes -------------------------------------------------------

def _worker_loop(conn, groups: list[GroupState], summaries: list[WorkerSummary], rho_grid) -> None:
    current = None
    try:
        while True:
            msg = conn.recv()
            if msg is None:
                break
            sweep, shared, rho, retain = msg
            out = []
            for i, group in enumerate(groups):
                current = group.index
                groups[i], summaries[i] = kernels.group_local_update(group, summaries[i], shared, rho, rho_grid, sweep)
                extra = (groups[i].factors.loadings, groups[i].factors.noise_variances) if retain else None
                out.append((summaries[i], extra))
            conn.send(("ok", out))
    except Exception as exc:  # reported to the coordinator, which aborts the run
        snapshot = {}
        for grp in groups:
            if grp.index == current:
                snapshot = {"loadings": grp.factors.loadings, "noise": grp.factors.noise_variances,
                            "tau": grp.factors.mgps.tau}
        conn.send(("error", current, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}", snapshot))
    finally:
        conn.close()


class _ProcessPool:
    """Persistent workers, groups assigned round-robin."""

    def __init__(self, state: CoupledState, worker_count: int):
        ctx = mp.get_context("fork")
        self.assignment = [list(range(w, len(state.groups), worker_count)) for w in range(worker_count)]
        self.conns, self.procs = [], []
        for groups in self.assignment:
            parent, child = ctx.Pipe()
            proc = ctx.Process(
                target=_worker_loop,
                args=(child, [state.groups[m] for m in groups], [state.summaries[m] for m in groups], state.rho_grid),
                daemon=True,
            )
            proc.start()
            child.close()
            self.conns.append(parent)
            self.procs.append(proc)

    def sweep(self, sweep: int, shared, rho: float, retain: bool):
        for conn in self.conns:
            conn.send((sweep, shared, rho, retain))
        results = {}
        for conn in self.conns:
            reply = conn.recv()
            if reply[0] == "error":
                _, group, message, snapshot = reply
                raise SamplerError(message, sweep, group, snapshot)
            for summary, extra in reply[1]:
                results[summary.group] = (summary, extra)
        return [results[m] for m in sorted(results)]

    def close(self):
        for conn in self.conns:
            try:
                conn.send(None)
            except (BrokenPipeError, OSError):
                pass
        for proc in self.procs:
            proc.join(timeout=5)
            if proc.is_alive():
                proc.terminate()


def run_parallel_workers(state: CoupledState, worker_count: int, config: RunConfig,
                         accumulator: PosteriorAccumulator, deadline: float | None = None,
                         on_sweep=None) -> CoupledState:
    """Run ``config.sweep_count`` coupled sweeps, feeding retained draws to ``accumulator``.

    ``worker_count == 1`` runs every group in-process; otherwise groups are
    spread round-robin over worker processes and each sweep is a barrier.
    Returns the final coordinator-side state (group states are only
    up to date for the in-process path).
    """
    if worker_count < 1:
        raise ValueError("worker_count must be at least 1")
    worker_count = min(worker_count, len(state.groups))
    if worker_count == 1:
        for sweep in range(1, config.sweep_count + 1):
            try:
                state = kernels.full_sweep(state)
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise SamplerError(str(exc), sweep, None) from exc
            if config.is_retained(sweep):
                accumulator.add([g.factors.loadings for g in state.groups],
                                [g.factors.noise_variances for g in state.groups], state.rho)
            if on_sweep is not None:
                on_sweep(sweep, state.summaries)
            if deadline is not None and time.monotonic() > deadline:
                raise BudgetExceeded(f"wall-clock budget exhausted after {sweep} sweeps")
        return state

    pool = _ProcessPool(state, worker_count)
    try:
        summaries, rho = state.summaries, state.rho
        shared = state.shared
        for sweep in range(1, config.sweep_count + 1):
            kernels.check_barrier(summaries, sweep - 1)
            try:
                shared = kernels.sample_shared_factors(summaries, rho, state.streams.shared)
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise SamplerError(str(exc), sweep, COORDINATOR) from exc
            retain = config.is_retained(sweep)
            results = pool.sweep(sweep, shared, rho, retain)
            summaries = [summary for summary, _ in results]
            rho = kernels.coordinator_rho(summaries, rho, state.rho_grid, state.streams.rho, state.rho_fixed)
            if retain:
                accumulator.add([extra[0] for _, extra in results], [extra[1] for _, extra in results], rho)
            if on_sweep is not None:
                on_sweep(sweep, summaries)
            if deadline is not None and time.monotonic() > deadline:
                raise BudgetExceeded(f"wall-clock budget exhausted after {sweep} sweeps")
    finally:
        pool.close()
    return CoupledState(state.groups, shared, rho, state.rho_grid, summaries, config.sweep_count,
                        state.streams, state.rho_fixed)


@dataclass
class RunReport:
    config: dict
    n: int
    p: int
    partition_seed: int
    group_sizes: list[int]
    timings: dict
    retained_draws: int
    rho: dict
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def partition_seed(seed: int) -> int:
    return int(seed_sequence(seed, COORDINATOR, "partition").generate_state(1)[0])


def run_estimation(data: DataMatrix, config: RunConfig, threads: int = 1, truth: np.ndarray | None = None,
                   partition: Partition | None = None, deadline: float | None = None,
                   on_sweep=None) -> tuple[CovEstimate, RunReport]:
    """Fit the coupled factor model and return the combined estimate and a report.

    Parameters
    ----------
    data : DataMatrix
        Centred observations.
    config : RunConfig
    threads : int
        Number of worker processes; 1 runs everything in-process.
    truth : np.ndarray, optional
        True covariance; when given the report includes error metrics.
    partition : Partition, optional
        Overrides the seeded random column partition.
    deadline : float, optional
        ``time.monotonic()`` value after which the run raises
        :class:`BudgetExceeded`.
    """
    t0 = time.perf_counter()
    values = data.values
    n, p = values.shape
    if p < config.g:
        raise ValueError(f"cannot split p={p} columns into g={config.g} groups")
    pseed = partition_seed(config.seed)
    if partition is None:
        partition = make_partition(p, config.g, pseed)
    elif partition.p != p or partition.g != config.g:
        raise ValueError("supplied partition does not match the data and config")
    t1 = time.perf_counter()

    k = config.factors_per_group
    grid = config.rho_grid()
    fixed = config.effective_rho_fixed
    rho0 = config.rho_init if fixed is None else fixed
    state = kernels.init_coupled_state([values[:, idx] for idx in partition.groups], k, config.hyper,
                                       config.seed, grid, rho0, fixed is not None)
    acc = PosteriorAccumulator(partition.sizes, k, config.retained_draws, config.materialize_sigma, partition)
    t2 = time.perf_counter()

    run_parallel_workers(state, threads, config, acc, deadline=deadline, on_sweep=on_sweep)
    t3 = time.perf_counter()

    estimate = combine(acc, partition)
    t4 = time.perf_counter()

    report = RunReport(
        config=config.to_dict(),
        n=n,
        p=p,
        partition_seed=pseed,
        group_sizes=partition.sizes,
        timings={
            "partition": t1 - t0,
            "initialize": t2 - t1,
            "sampling": t3 - t2,
            "combine": t4 - t3,
            "total": t4 - t0,
            "per_sweep": (t3 - t2) / config.sweep_count,
        },
        retained_draws=acc.count,
        rho=acc.rho_summary(),
    )
    report.extra["threads"] = threads
    if acc.sigma_sum is not None:
        draw_mean = acc.sigma_sum / acc.count
        report.extra["draw_mean_minus_component_mean_fro"] = float(
            np.linalg.norm(draw_mean - materialize_covariance(estimate)))
    if truth is not None:
        from .metrics import error_summaries, operator_norm_error

        report.metrics = {"operator_norm_error": operator_norm_error(estimate, truth),
                          **error_summaries(materialize_covariance(estimate), truth)}
    logger.info("fit g=%d k_g=%d p=%d n=%d in %.2fs", config.g, k, p, n, t4 - t0)
    return estimate, report
