"""Command-line interface.

Subcommands: simulate, fit, evaluate, bench, trace-experiment, adjacency.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 budget exceeded.  Every output is written to a temporary file in the
target directory and renamed into place, so an interrupted command never
leaves a partial file behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, load_config
from .engine import BudgetExceeded, RunConfig, SamplerError, run_estimation
from .metrics import error_summaries, leading_eigenvalues, operator_norm_error, threshold_adjacency
from .mgps import TRACE_CSV_COLUMNS, trace_concentration_experiment
from .model import CovEstimate, MgpsHyperparams, center_columns, materialize_covariance
from .synth import default_sparsity, generate

logger = logging.getLogger("dnccov")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BUDGET = 0, 2, 3, 4

BENCH_METRICS = ("time", "operator_norm_error", "mse", "avg_abs_bias", "max_abs_bias")
BENCH_COLUMNS = ("p", "k", "n", "g", "replicates", "status") + tuple(
    f"{name}_{stat}" for name in BENCH_METRICS for stat in ("mean", "se"))


# --- file helpers -------------------------------------------------------------

def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary sibling and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_savetxt(path, array: np.ndarray) -> None:
    buf = io.StringIO()
    np.savetxt(buf, array, delimiter=",", fmt="%.17g")
    atomic_write(path, buf.getvalue())


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _read_matrix(path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read matrix from {path}: {exc}") from exc


def _read_covariance(path):
    """A factored estimate (``.json``) or a dense header-free CSV."""
    if str(path).endswith(".json"):
        try:
            return CovEstimate.load(path)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read estimate from {path}: {exc}") from exc
    return _read_matrix(path)


def _manifest(command: str, cfg: Config | None, args: argparse.Namespace, files, **extra) -> dict:
    out = {
        "command": command,
        "arguments": {key: value for key, value in vars(args).items() if key not in ("func",)},
        "files": sorted(str(f) for f in files),
    }
    if cfg is not None:
        out["seed"] = cfg.values.get("run", {}).get("seed")
        out["config"] = cfg.echo()
        out["config_text"] = cfg.source
    out.update(extra)
    return out


# --- config translation -----------------------------------------------------

def hyperparams_from(cfg: Config) -> MgpsHyperparams:
    try:
        return MgpsHyperparams(**cfg.section("prior"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run_config_from(cfg: Config, g: int | None = None, k: int | None = None, seed: int | None = None) -> RunConfig:
    """RunConfig from the ``[fit]`` and ``[prior]`` sections; arguments override."""
    fit = cfg.section("fit")
    fit.pop("budget_seconds", None)
    if g is not None:
        fit["g"] = g
    if k is not None:
        fit["k"] = k
    try:
        return RunConfig(seed=cfg.seed if seed is None else seed, hyper=hyperparams_from(cfg), **fit)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [fit] settings: {exc}") from exc


def _deadline(seconds):
    return None if seconds is None else time.monotonic() + seconds


# --- subcommands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    cfg.require("run", "seed")
    cfg.require("data", "p", "k", "n")
    spec = cfg.section("data")
    s = spec.get("s") or default_sparsity(spec["p"])
    try:
        data, loadings, sigma = generate(spec["p"], spec["k"], s, spec["n"], spec.get("sigma2", 0.5), seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    files = {"data": out / "data.csv", "loadings": out / "loadings.csv", "sigma": out / "sigma.csv"}
    atomic_savetxt(files["data"], data.values + data.column_means)
    atomic_savetxt(files["loadings"], loadings)
    atomic_savetxt(files["sigma"], sigma)
    manifest = _manifest("simulate", cfg, args, [f.name for f in files.values()], sparsity=s,
                         sha256={key: _sha256(path) for key, path in files.items()})
    atomic_write(out / "manifest.json", _json(manifest))
    logger.info("wrote dataset n=%d p=%d s=%d to %s", spec["n"], spec["p"], s, out)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    if args.data is None:
        raise ConfigError("fit needs --data")
    config = run_config_from(cfg, g=args.groups)
    budget = cfg.section("fit").get("budget_seconds")
    data_path = args.data[0]
    try:
        data = center_columns(_read_matrix(data_path))
    except ValueError as exc:
        raise ConfigError(f"{data_path}: {exc}") from exc
    truth = _read_matrix(args.truth) if args.truth else None
    try:
        est, report = run_estimation(data, config, threads=args.threads, truth=truth, deadline=_deadline(budget))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    out = Path(args.out)
    echo = {"seed": config.seed, "config": config.to_dict(), "data_sha256": _sha256(data_path)}
    atomic_write(out / "estimate.json", _json({**echo, **est.to_dict()}))
    atomic_write(out / "report.json", _json({**echo, **report.to_dict()}))
    files = ["estimate.json", "report.json"]
    if config.materialize_sigma:
        atomic_savetxt(out / "sigma_hat.csv", materialize_covariance(est))
        files.append("sigma_hat.csv")
    atomic_write(out / "manifest.json", _json(_manifest("fit", cfg, args, files, **echo)))
    logger.info("fit finished in %.2fs; rho mean %.3f", report.timings["total"], report.rho.get("mean", float("nan")))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not args.data or args.truth is None:
        raise ConfigError("evaluate needs at least one --data estimate and --truth")
    truth = _read_covariance(args.truth)
    results, log_rows, files = [], [], []
    for i, path in enumerate(args.data):
        est = _read_covariance(path)
        g = est.g if isinstance(est, CovEstimate) else 1
        dense = materialize_covariance(est) if isinstance(est, CovEstimate) else est
        truth_dense = materialize_covariance(truth) if isinstance(truth, CovEstimate) else truth
        if dense.shape != truth_dense.shape:
            raise ConfigError(f"{path}: shape {dense.shape} does not match truth {truth_dense.shape}")
        err = operator_norm_error(est, truth)
        row = {"estimate": str(path), "g": g, "operator_norm_error": err, **error_summaries(dense, truth_dense)}
        results.append(row)
        log_rows.append([g, repr(math.log(err)) if err > 0 else "-inf"])
        count = min(args.eigen_count, dense.shape[0])
        vals = leading_eigenvalues(est, count)
        name = f"eigenvalues_{i}.csv"
        atomic_write(Path(args.out) / name, _csv_text(("index", "value"),
                                                      [[j + 1, repr(float(v))] for j, v in enumerate(vals)]))
        row["eigenvalues_file"] = name
        files.append(name)
    out = Path(args.out)
    atomic_write(out / "metrics.json", _json({"results": results, "truth": str(args.truth)}))
    atomic_write(out / "log_operator_norm_error.csv", _csv_text(("g", "log_operator_norm_error"), log_rows))
    files += ["metrics.json", "log_operator_norm_error.csv"]
    atomic_write(out / "manifest.json", _json(_manifest("evaluate", None, args, files)))
    return EXIT_OK


def _mean_se(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


def run_bench(cfg: Config, threads: int = 1) -> list[dict]:
    """Run every (p, k, n, g) cell of the grid; returns one row per cell.

    Replicate ``r`` uses seed ``seed + r`` for both the data and the fit.  A
    cell whose replicate passes ``budget_seconds`` is marked ``Fail``.
    """
    cfg.require("run", "seed")
    cfg.require("bench", "p", "k", "n", "g", "replicates")
    bench = cfg.section("bench")
    threads = bench.get("threads", threads)
    rows = []
    for p in bench["p"]:
        for k in bench["k"]:
            for n in bench["n"]:
                for g in bench["g"]:
                    rows.append(_bench_cell(cfg, bench, p, k, n, g, threads))
    return rows


def _bench_cell(cfg: Config, bench: dict, p: int, k: int, n: int, g: int, threads: int) -> dict:
    reps = bench["replicates"]
    s = bench.get("s") or default_sparsity(p)
    row = {"p": p, "k": k, "n": n, "g": g, "replicates": reps, "status": "ok"}
    samples = {name: [] for name in BENCH_METRICS}
    for r in range(reps):
        seed = cfg.seed + r
        data, _, sigma = generate(p, k, s, n, bench.get("sigma2", 0.5), seed=seed)
        config = run_config_from(cfg, g=g, k=k, seed=seed)
        start = time.perf_counter()
        try:
            _, report = run_estimation(data, config, threads=threads, truth=sigma,
                                       deadline=_deadline(bench.get("budget_seconds")))
        except BudgetExceeded:
            logger.warning("cell p=%d k=%d n=%d g=%d exceeded its budget", p, k, n, g)
            row["status"] = "Fail"
            break
        samples["time"].append(time.perf_counter() - start)
        for name in BENCH_METRICS[1:]:
            samples[name].append(report.metrics[name])
    for name, values in samples.items():
        if row["status"] == "Fail":
            row[f"{name}_mean"] = row[f"{name}_se"] = "Fail"
        else:
            row[f"{name}_mean"], row[f"{name}_se"] = _mean_se(values)
    return row


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    rows = run_bench(cfg, threads=args.threads)
    out = Path(args.out)
    table = [[row[col] if isinstance(row[col], (str, int)) else repr(row[col]) for col in BENCH_COLUMNS]
             for row in rows]
    atomic_write(out / "table.csv", _csv_text(BENCH_COLUMNS, table))
    atomic_write(out / "manifest.json", _json(_manifest("bench", cfg, args, ["table.csv"])))
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = load_config(args.config)
    cfg.require("trace", "p", "k", "s", "epsilons", "n_draws")
    spec = cfg.section("trace")
    try:
        rows = trace_concentration_experiment(spec["p"], spec["k"], spec["s"], hyperparams_from(cfg),
                                              spec["epsilons"], spec["n_draws"], seed=cfg.seed,
                                              groups=spec.get("groups", 1))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    atomic_write(out / "trace.csv", _csv_text(TRACE_CSV_COLUMNS,
                                              [[repr(row[c]) for c in TRACE_CSV_COLUMNS] for row in rows]))
    atomic_write(out / "manifest.json", _json(_manifest("trace-experiment", cfg, args, ["trace.csv"])))
    return EXIT_OK


def cmd_adjacency(args) -> int:
    if not args.data or args.threshold is None:
        raise ConfigError("adjacency needs --data and --threshold")
    est = _read_covariance(args.data[0])
    out = Path(args.out)
    buf = io.StringIO()
    try:
        edges = threshold_adjacency(est, args.threshold, buf)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    atomic_write(out / "edges.csv", buf.getvalue())
    atomic_write(out / "manifest.json", _json(_manifest("adjacency", None, args, ["edges.csv"], edges=edges)))
    logger.info("%d edges at threshold %g", edges, args.threshold)
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnccov", description="Divide-and-conquer Bayesian covariance estimation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--out", required=True, help="output directory")
        cmd.set_defaults(func=func)
        return cmd

    cmd = add("simulate", cmd_simulate, "generate a synthetic dataset and its true covariance")
    cmd.add_argument("--config", required=True)

    cmd = add("fit", cmd_fit, "fit the coupled factor model to a data CSV")
    cmd.add_argument("--config", required=True)
    cmd.add_argument("--data", action="append", required=True, help="n x p data CSV without header")
    cmd.add_argument("--truth", help="true covariance CSV; adds error metrics to the report")
    cmd.add_argument("--groups", type=int, help="overrides fit.g")
    cmd.add_argument("--threads", type=int, default=1, help="worker processes")

    cmd = add("evaluate", cmd_evaluate, "score estimates against a true covariance")
    cmd.add_argument("--data", action="append", required=True, help="estimate.json or dense CSV; repeatable")
    cmd.add_argument("--truth", required=True)
    cmd.add_argument("--eigen-count", type=int, default=100)

    cmd = add("bench", cmd_bench, "run a replicated (p, k, n, g) grid")
    cmd.add_argument("--config", required=True)
    cmd.add_argument("--threads", type=int, default=1)

    cmd = add("trace-experiment", cmd_trace, "Monte Carlo trace concentration under the prior")
    cmd.add_argument("--config", required=True)

    cmd = add("adjacency", cmd_adjacency, "export the thresholded correlation network")
    cmd.add_argument("--data", action="append", required=True, help="estimate.json or dense CSV")
    cmd.add_argument("--threshold", type=float, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (SamplerError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
