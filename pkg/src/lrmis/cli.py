"""Experiment orchestration: configs, trials, result tables, plots.

A TOML config file holds one [experiment] table or a [[experiments]] list;
mode = "table1" expands the benchmark hyperparameter grid instead.  Each
trial derives its own seed from (master seed, trial index), owns its RNG
streams and problem instance, and may run in a separate process; rows are
identical regardless of worker count.  Every output byte except measured
wall times is determined by (config, seed).

The only environment variable read is LRMIS_LOG_LEVEL.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import _seeding, metrics, problems, samplers
from .density import StandardNormalPrior, model_to_json
from .em import EmConfig

log = logging.getLogger("lrmis")

RESULT_COLUMNS = [
    "trial",
    "problem",
    "d",
    "method",
    "family",
    "pf_estimate",
    "rel_error",
    "avg_nll",
    "coverage",
    "ndb_ratio",
    "n_total",
    "iterations",
    "wall_time_s",
    "error",
]
_NUMERIC_COLUMNS = [
    "pf_estimate",
    "rel_error",
    "avg_nll",
    "coverage",
    "ndb_ratio",
    "n_total",
    "iterations",
    "wall_time_s",
]


@dataclass(frozen=True)
class ProblemConfig:
    kind: str = "branches"  # branches | oscillator | external
    dim: int = 40
    beta: float = 3.5
    dt: float = 1e-3
    command: str = ""
    timeout: float = 60.0

    def build(self):
        if self.kind == "branches":
            return problems.branches_problem(dim=self.dim, beta=self.beta)
        if self.kind == "oscillator":
            return problems.duffing_problem(dim=self.dim, dt=self.dt)
        if self.kind == "external":
            if not self.command:
                raise ValueError("external problem requires a command")
            return problems.external_problem(
                self.command, self.dim, timeout=self.timeout
            )
        raise ValueError(f"unknown problem kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = ""
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    method: str = "ce"  # ce | sis
    family: str = "mppca"
    em: EmConfig = field(default_factory=EmConfig)
    elite_quantile: float = 0.2
    samples_per_stage: int = 10000
    max_stages: int = 20
    loglik_rel_tol: float = 1e-3
    warm_start: bool = True
    weight_cv_target: float = 1.5
    burn_in: int = 5
    mh_correlation: float = 0.8
    sigma_min: float = 1e-4
    samples_per_chain: int = 10
    trials: int = 50
    seed: int = 0
    out_dir: str = "results"
    workers: int = 1
    plot: bool = False
    eval_samples: int = 10000
    reference_path: str = ""
    pf_ref: float = math.nan
    coverage_k: int = 5
    ndb_bins: int = 50
    ndb_alpha: float = 0.05

    def label(self):
        return self.name or (
            f"{self.problem.kind}{self.problem.dim}-{self.method}-{self.family}"
        )

    def sampler_config(self):
        if self.method == "ce":
            return samplers.CeConfig(
                elite_quantile=self.elite_quantile,
                samples_per_stage=self.samples_per_stage,
                max_stages=self.max_stages,
                loglik_rel_tol=self.loglik_rel_tol,
                family=self.family,
                em=self.em,
                warm_start=self.warm_start,
            )
        if self.method == "sis":
            return samplers.SisConfig(
                samples_per_stage=self.samples_per_stage,
                weight_cv_target=self.weight_cv_target,
                burn_in=self.burn_in,
                mh_correlation=self.mh_correlation,
                max_stages=self.max_stages,
                sigma_min=self.sigma_min,
                samples_per_chain=self.samples_per_chain,
                family=self.family,
                em=self.em,
            )
        raise ValueError(f"unknown method {self.method!r}")


# ---------------------------------------------------------------------------
# Config parsing

def _problem_from_table(tbl):
    return ProblemConfig(
        kind=tbl.get("kind", "branches"),
        dim=int(tbl.get("d", 40)),
        beta=float(tbl.get("beta", 3.5)),
        dt=float(tbl.get("dt", 1e-3)),
        command=tbl.get("command", ""),
        timeout=float(tbl.get("timeout", 60.0)),
    )


def _em_from_table(tbl):
    return EmConfig(
        n_components=int(tbl.get("k", 8)),
        latent_dim=int(tbl.get("l", 8)),
        max_iters=int(tbl.get("max_iters", 200)),
        rel_tol=float(tbl.get("rel_tol", 1e-5)),
        sigma2_floor=float(tbl.get("sigma2_floor", 1e-6)),
        weight_floor=float(tbl.get("weight_floor", 1e-8)),
        init=tbl.get("init", "kmeans"),
        seed=int(tbl.get("seed", 0)),
    )


def _experiment_from_table(tbl):
    method_tbl = tbl.get("method", {})
    run_tbl = tbl.get("run", {})
    ref_tbl = tbl.get("reference", {})
    return ExperimentConfig(
        name=tbl.get("name", ""),
        problem=_problem_from_table(tbl.get("problem", {})),
        method=method_tbl.get("kind", "ce"),
        family=method_tbl.get("family", "mppca"),
        em=_em_from_table(tbl.get("em", {})),
        elite_quantile=float(method_tbl.get("rho", 0.2)),
        samples_per_stage=int(method_tbl.get("samples_per_stage", 10000)),
        max_stages=int(method_tbl.get("max_stages", 20)),
        loglik_rel_tol=float(method_tbl.get("ll_rel_tol", 1e-3)),
        warm_start=bool(method_tbl.get("warm_start", True)),
        weight_cv_target=float(method_tbl.get("weight_cv_target", 1.5)),
        burn_in=int(method_tbl.get("burn_in", 5)),
        mh_correlation=float(method_tbl.get("mh_correlation", 0.8)),
        sigma_min=float(method_tbl.get("sigma_min", 1e-4)),
        samples_per_chain=int(method_tbl.get("samples_per_chain", 10)),
        trials=int(run_tbl.get("trials", 50)),
        seed=int(run_tbl.get("seed", 0)),
        out_dir=run_tbl.get("out", "results"),
        workers=int(run_tbl.get("workers", 1)),
        plot=bool(run_tbl.get("plot", False)),
        eval_samples=int(run_tbl.get("eval_samples", 10000)),
        reference_path=ref_tbl.get("path", ""),
        pf_ref=float(ref_tbl.get("pf", math.nan)),
        coverage_k=int(ref_tbl.get("coverage_k", 5)),
        ndb_bins=int(ref_tbl.get("ndb_bins", 50)),
        ndb_alpha=float(ref_tbl.get("ndb_alpha", 0.05)),
    )


def _table1_grid(tbl):
    """The benchmark hyperparameter grid: K=8, L=8, 10000 samples/stage,
    50 trials, rho=0.2 on branches d=40/60 and oscillator d=100/200, plus
    an external-simulator row when a command is configured."""
    base = {
        "em": {"k": 8, "l": 8},
        "method": {"kind": tbl.get("method", "ce"), "family": tbl.get("family", "mppca")},
        "run": {
            "trials": int(tbl.get("trials", 50)),
            "seed": int(tbl.get("seed", 0)),
            "out": tbl.get("out", "results"),
            "workers": int(tbl.get("workers", 1)),
        },
    }
    rows = [
        {"kind": "branches", "d": 40},
        {"kind": "branches", "d": 60},
        {"kind": "oscillator", "d": 100},
        {"kind": "oscillator", "d": 200},
    ]
    if tbl.get("external_command"):
        rows.append(
            {
                "kind": "external",
                "d": int(tbl.get("external_d", 202)),
                "command": tbl["external_command"],
            }
        )
    out = []
    for row in rows:
        doc = dict(base)
        doc["problem"] = row
        doc["name"] = f"{row['kind']}{row['d']}"
        out.append(_experiment_from_table(doc))
    return out


def parse_config(path):
    """Parse a TOML config file into a list of ExperimentConfig."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    if doc.get("mode") == "table1":
        return _table1_grid(doc.get("table1", {}))
    if "experiments" in doc:
        return [_experiment_from_table(t) for t in doc["experiments"]]
    if "experiment" in doc:
        return [_experiment_from_table(doc["experiment"])]
    raise ValueError(
        f"{path}: expected [experiment], [[experiments]], or mode='table1'"
    )


# ---------------------------------------------------------------------------
# Trials

def run_trial(cfg, trial):
    """Run one seeded trial; returns (row dict, RunResult or None)."""
    t0 = time.perf_counter()
    seed = _seeding.trial_seed(cfg.seed, trial)
    row = {
        "trial": trial,
        "problem": cfg.problem.kind,
        "d": cfg.problem.dim,
        "method": cfg.method,
        "family": cfg.family,
        "error": "",
    }
    problem = None
    try:
        problem = cfg.problem.build()
        scfg = cfg.sampler_config()
        if cfg.method == "ce":
            run = samplers.cross_entropy_is(problem, scfg, seed)
        else:
            run = samplers.sequential_is(problem, scfg, seed)
        report = _metric_report(cfg, run, seed)
        row.update(
            pf_estimate=run.pf_hat,
            rel_error=report.rel_error,
            avg_nll=report.avg_nll,
            coverage=report.coverage,
            ndb_ratio=report.ndb_ratio,
            n_total=run.n_total,
            iterations=run.estimate.iterations,
            wall_time_s=time.perf_counter() - t0,
        )
        return row, run
    except Exception as exc:  # per-row error recording
        log.exception("trial %d failed", trial)
        row.update(
            pf_estimate=math.nan,
            rel_error=math.nan,
            avg_nll=math.nan,
            coverage=math.nan,
            ndb_ratio=math.nan,
            n_total=0,
            iterations=0,
            wall_time_s=time.perf_counter() - t0,
            error=f"{type(exc).__name__}: {exc}",
        )
        return row, None
    finally:
        if problem is not None and hasattr(problem, "close"):
            problem.close()


def _metric_report(cfg, run, seed):
    prior = StandardNormalPrior(cfg.problem.dim)
    batch = run.model.sample(
        cfg.eval_samples, _seeding.stream(seed, _seeding.METRICS)
    )
    nll = metrics.avg_nll(batch, prior)
    rel = math.nan
    cov = math.nan
    ndb_ratio = math.nan
    pf_ref = cfg.pf_ref
    ref_points = None
    if cfg.reference_path:
        ref = metrics.ReferenceSet.load(cfg.reference_path)
        if ref.dim != cfg.problem.dim:
            raise ValueError(
                f"reference set dimension {ref.dim} != problem {cfg.problem.dim}"
            )
        ref_points = ref.points[: cfg.eval_samples]
        if math.isnan(pf_ref):
            pf_ref = ref.pf_ref
    if not math.isnan(pf_ref):
        rel = metrics.relative_error(run.pf_hat, pf_ref)
    if ref_points is not None and ref_points.shape[0] > cfg.coverage_k:
        cov = metrics.coverage(ref_points, batch, k=cfg.coverage_k)
        _, ndb_ratio = metrics.ndb(
            ref_points,
            batch,
            n_bins=cfg.ndb_bins,
            alpha=cfg.ndb_alpha,
            seed=seed,
        )
    return metrics.MetricReport(
        rel_error=rel,
        avg_nll=nll,
        coverage=cov,
        ndb_ratio=ndb_ratio,
        n_total=run.n_total,
    )


def _format_cell(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _trial_worker(payload):
    cfg, trial = payload
    row, run = run_trial(cfg, trial)
    artifacts = None
    if run is not None:
        artifacts = {
            "trace": [
                (r.stage, r.gamma_or_sigma, r.n_elite_or_ess, r.pf_partial,
                 r.em_iters, r.wall_time_s)
                for r in run.trace
            ],
            "model_json": model_to_json(run.model),
            "samples": run.samples,
            "costs": run.costs,
        }
    return row, artifacts


def run_experiment(cfg):
    """Execute cfg.trials independent trials and write result artifacts.

    Writes results.csv, summary.json, per-trial trace CSVs and model JSONs
    (and scatter SVGs when plotting is enabled) under cfg.out_dir.
    Returns the list of row dicts.
    """
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    payloads = [(cfg, t) for t in range(cfg.trials)]
    results = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_trial_worker, payloads))
    else:
        results = [_trial_worker(p) for p in payloads]

    rows = []
    for (row, artifacts) in results:
        rows.append(row)
        trial = row["trial"]
        if artifacts is None:
            continue
        trace_path = os.path.join(out_dir, f"trace_trial{trial:03d}.csv")
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["stage", "gamma_or_sigma", "n_elite_or_ess", "pf_partial",
                 "em_iters", "wall_time_s"]
            )
            for rec in artifacts["trace"]:
                writer.writerow(
                    [rec[0], repr(rec[1]), repr(rec[2]), repr(rec[3]), rec[4],
                     repr(rec[5])]
                )
        with open(os.path.join(out_dir, f"model_trial{trial:03d}.json"), "w") as fh:
            fh.write(artifacts["model_json"])
            fh.write("\n")
        if cfg.plot:
            seed = _seeding.trial_seed(cfg.seed, trial)
            projection = "sum-halves" if cfg.problem.kind == "branches" else None
            dims = None if projection else (0, 1)
            emit_scatter(
                artifacts["samples"],
                artifacts["costs"],
                os.path.join(out_dir, f"scatter_trial{trial:03d}.svg"),
                dims=dims,
                projection=projection,
                seed=seed,
            )

    rows.sort(key=lambda r: r["trial"])
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_format_cell(row[c]) for c in RESULT_COLUMNS])

    summary = summarize_rows(rows)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    n_failed = sum(1 for r in rows if r["error"])
    if n_failed:
        log.warning("%d/%d trials failed", n_failed, len(rows))
    return rows


def summarize_rows(rows):
    """Mean and standard deviation per numeric column over clean trials."""
    good = [r for r in rows if not r["error"]]
    summary = {
        "n_trials": len(rows),
        "n_failed": len(rows) - len(good),
        "columns": {},
    }
    for col in _NUMERIC_COLUMNS:
        vals = np.array([float(r[col]) for r in good], dtype=float)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            summary["columns"][col] = {"mean": None, "std": None, "n": 0}
            continue
        mean = float(np.mean(vals))
        std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        summary["columns"][col] = {"mean": mean, "std": std, "n": int(vals.size)}
    return summary


# ---------------------------------------------------------------------------
# Scatter SVG

_SVG_SIZE = 640
_SVG_MARGIN = 40


def scatter_from_run(run, path, dims=None, projection=None, seed=0):
    """emit_scatter on a RunResult's stored evaluation batch."""
    if getattr(run, "samples", None) is None or getattr(run, "costs", None) is None:
        raise ValueError("run has no stored evaluation samples")
    emit_scatter(
        run.samples, run.costs, path, dims=dims, projection=projection, seed=seed
    )


def emit_scatter(samples, costs, path, dims=None, projection=None, seed=0,
                 max_failures=400):
    """Write a deterministic SVG scatter of an evaluation batch.

    Failure points (cost <= 0) are drawn red, others gray, subsampled to a
    fixed 1:4 failure-to-non-failure ratio.  dims picks two coordinates;
    projection="sum-halves" maps x to ((h1+h2)/sqrt(d), (h1-h2)/sqrt(d))
    with h1, h2 the half sums.
    """
    if samples is None or costs is None:
        raise ValueError("run has no stored evaluation samples")
    samples = np.asarray(samples, dtype=float)
    costs = np.asarray(costs, dtype=float)
    if projection == "sum-halves":
        d = samples.shape[1]
        half = d // 2
        h1 = samples[:, :half].sum(axis=1)
        h2 = samples[:, half:].sum(axis=1)
        xy = np.stack([(h1 + h2), (h1 - h2)], axis=1) / math.sqrt(d)
    elif projection is None:
        i, j = dims if dims is not None else (0, 1)
        xy = samples[:, [i, j]]
    else:
        raise ValueError(f"unknown projection {projection!r}")

    fail = np.flatnonzero(costs <= 0)
    ok = np.flatnonzero(costs > 0)
    rng = _seeding.stream(seed, _seeding.PLOT)
    n_fail = min(fail.size, ok.size // 4 if ok.size else fail.size, max_failures)
    if fail.size > n_fail:
        fail = fail[np.sort(rng.choice(fail.size, size=n_fail, replace=False))]
    n_ok = min(ok.size, 4 * max(n_fail, 1) if fail.size else 4 * max_failures)
    if ok.size > n_ok:
        ok = ok[np.sort(rng.choice(ok.size, size=n_ok, replace=False))]

    shown = np.concatenate([xy[ok], xy[fail]]) if (ok.size or fail.size) else xy[:0]
    if shown.size:
        lo = shown.min(axis=0)
        hi = shown.max(axis=0)
    else:
        lo = np.array([-1.0, -1.0])
        hi = np.array([1.0, 1.0])
    span = np.maximum(hi - lo, 1e-9)
    scale = (_SVG_SIZE - 2 * _SVG_MARGIN) / span

    def to_px(p):
        x = _SVG_MARGIN + (p[0] - lo[0]) * scale[0]
        y = _SVG_SIZE - _SVG_MARGIN - (p[1] - lo[1]) * scale[1]
        return x, y

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_SIZE}" '
        f'height="{_SVG_SIZE}" viewBox="0 0 {_SVG_SIZE} {_SVG_SIZE}">',
        f'<rect width="{_SVG_SIZE}" height="{_SVG_SIZE}" fill="white"/>',
    ]
    for idx_set, color in ((ok, "#9aa0a6"), (fail, "#d93025")):
        for i in idx_set:
            x, y = to_px(xy[i])
            parts.append(
                f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.2" fill="{color}" '
                f'fill-opacity="0.75"/>'
            )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
        fh.write("\n")


# ---------------------------------------------------------------------------
# Entry points

def _cmd_run(args):
    configs = parse_config(args.config)
    overrides = {}
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.plot:
        overrides["plot"] = True
    all_failed = True
    for cfg in configs:
        if overrides:
            cfg = replace(cfg, **overrides)
        if args.out is not None:
            subdir = cfg.label() if len(configs) > 1 else ""
            cfg = replace(cfg, out_dir=os.path.join(args.out, subdir))
        log.info("running %s: %d trials -> %s", cfg.label(), cfg.trials, cfg.out_dir)
        rows = run_experiment(cfg)
        if any(not r["error"] for r in rows):
            all_failed = False
    return 1 if all_failed else 0


def _cmd_reference(args):
    if args.problem == "branches":
        problem = problems.branches_problem(dim=args.d, beta=args.beta)
        factory = (problems.branches_problem, (args.d, args.beta))
    elif args.problem == "oscillator":
        problem = problems.duffing_problem(dim=args.d, dt=args.dt)
        factory = (problems.duffing_problem, (args.d, args.dt))
    else:
        raise ValueError(f"unknown problem {args.problem!r}")
    ref = metrics.build_reference_set(
        problem,
        args.n,
        args.seed,
        max_keep=args.max_keep,
        workers=args.workers,
        problem_factory=factory,
    )
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    ref.save(args.out)
    log.info(
        "reference for %s: pf=%.6g, %d failure samples from n=%d",
        problem.name,
        ref.pf_ref,
        ref.points.shape[0],
        args.n,
    )
    print(f"pf_ref={ref.pf_ref!r} failures_kept={ref.points.shape[0]}")
    return 0


def _cmd_stub(args):
    return problems.run_protocol_stub(
        args.d, cost=args.cost, beta=args.beta, shuffle=args.shuffle
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lrmis",
        description="Rare-event importance sampling with low-rank mixture proposals",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run experiments from a TOML config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--trials", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--workers", type=int, default=None)
    p_run.add_argument("--plot", action="store_true")
    p_run.set_defaults(func=_cmd_run)

    p_ref = sub.add_parser("reference", help="build a reference failure-sample cache")
    p_ref.add_argument("--problem", required=True, choices=["branches", "oscillator"])
    p_ref.add_argument("--d", type=int, required=True)
    p_ref.add_argument("--n", type=int, required=True)
    p_ref.add_argument("--out", required=True)
    p_ref.add_argument("--seed", type=int, default=0)
    p_ref.add_argument("--beta", type=float, default=3.5)
    p_ref.add_argument("--dt", type=float, default=1e-3)
    p_ref.add_argument("--max-keep", type=int, default=10000)
    p_ref.add_argument("--workers", type=int, default=1)
    p_ref.set_defaults(func=_cmd_reference)

    p_stub = sub.add_parser("protocol-stub", help="serve the test simulator stub")
    p_stub.add_argument("--d", type=int, required=True)
    p_stub.add_argument("--cost", choices=["quadratic", "linear"], default="quadratic")
    p_stub.add_argument("--beta", type=float, default=3.0)
    p_stub.add_argument("--shuffle", type=int, default=0)
    p_stub.set_defaults(func=_cmd_stub)
    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("LRMIS_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
