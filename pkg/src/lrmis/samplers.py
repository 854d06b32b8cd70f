"""Adaptive importance-sampling drivers and failure-probability estimators.

Two drivers share the estimator plumbing:

* cross_entropy_is walks a sequence of intermediate failure regions, each
  holding the elite_quantile fraction of the current batch, refitting the
  proposal by weighted maximum likelihood on the elite samples.  The first
  stage whose threshold clamps to zero is the final stage: its batch (drawn
  from the current proposal and not yet used for fitting) supplies the
  importance-sampling estimate, and the model is refit once more on that
  batch's failures to produce the final proposal for metric evaluation.
* sequential_is moves a particle population through smoothed-indicator
  densities p(x)*Phi(-f(x)/sigma_t) with sigma_t chosen by bisection so the
  incremental-weight coefficient of variation matches a target, resampling
  chain seeds multinomially and mutating them with a conditional-sampling
  (preconditioned Crank-Nicolson) Metropolis-Hastings kernel.

Every problem evaluation inside a driver passes through CountingProblem, so
n_total is an audited count of cost-function calls.  Samples for a stage are
generated before dispatch and reductions run in fixed index order, making
results bit-identical for a fixed seed.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import _seeding
from .density import StandardNormalPrior
from .em import EmConfig, WeightedDataset, config_for_dim, fit_family


class SamplerError(RuntimeError):
    pass


class CountingProblem:
    """Wrapper that counts every cost evaluation exactly once."""

    def __init__(self, problem):
        self._problem = problem
        self.n_evals = 0

    @property
    def name(self):
        return self._problem.name

    @property
    def dim(self):
        return self._problem.dim

    def cost(self, x):
        out = self._problem.cost(x)
        self.n_evals += len(out)
        return out


@dataclass(frozen=True)
class CeConfig:
    """Cross-entropy driver configuration (defaults follow the benchmarks)."""

    elite_quantile: float = 0.2
    samples_per_stage: int = 10000
    max_stages: int = 20
    loglik_rel_tol: float = 1e-3
    family: str = "mppca"
    em: EmConfig = field(default_factory=EmConfig)
    warm_start: bool = True

    def __post_init__(self):
        if not 0.0 < self.elite_quantile < 1.0:
            raise ValueError("elite_quantile must lie in (0, 1)")
        if self.samples_per_stage < 1 or self.max_stages < 1:
            raise ValueError("samples_per_stage and max_stages must be >= 1")
        if self.family not in ("mppca", "gmm"):
            raise ValueError(f"unknown model family {self.family!r}")


@dataclass(frozen=True)
class SisConfig:
    """Sequential importance sampling configuration.

    Each stage resamples samples_per_stage // samples_per_chain seeds and
    runs every chain burn_in + samples_per_chain Metropolis-Hastings moves,
    keeping the post-burn-in states.
    """

    samples_per_stage: int = 10000
    weight_cv_target: float = 1.5
    burn_in: int = 5
    mh_correlation: float = 0.8
    max_stages: int = 30
    sigma_min: float = 1e-4
    samples_per_chain: int = 10
    family: str = "mppca"
    em: EmConfig = field(default_factory=EmConfig)

    def __post_init__(self):
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if not 0.0 < self.mh_correlation < 1.0:
            raise ValueError("mh_correlation must lie in (0, 1)")
        if self.samples_per_chain < 1:
            raise ValueError("samples_per_chain must be >= 1")
        if self.samples_per_stage % self.samples_per_chain != 0:
            raise ValueError("samples_per_chain must divide samples_per_stage")
        if self.family not in ("mppca", "gmm"):
            raise ValueError(f"unknown model family {self.family!r}")


@dataclass
class IsEstimate:
    """A failure-probability estimate and its bookkeeping."""

    pf_hat: float
    cov_hat: float
    n_total: int
    iterations: int
    model: object = None

    def __post_init__(self):
        if self.pf_hat < 0:
            raise ValueError("pf_hat must be >= 0")


@dataclass
class StageRecord:
    stage: int
    gamma_or_sigma: float
    n_elite_or_ess: float
    pf_partial: float
    em_iters: int
    wall_time_s: float


@dataclass
class RunResult:
    """One driver run: estimate, final model, trace, and the stored
    evaluation batch (samples + costs) for plotting."""

    estimate: IsEstimate
    model: object
    trace: list
    samples: np.ndarray
    costs: np.ndarray

    @property
    def pf_hat(self):
        return self.estimate.pf_hat

    @property
    def n_total(self):
        return self.estimate.n_total

    def write_trace_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                [
                    "stage",
                    "gamma_or_sigma",
                    "n_elite_or_ess",
                    "pf_partial",
                    "em_iters",
                    "wall_time_s",
                ]
            )
            for r in self.trace:
                writer.writerow(
                    [
                        r.stage,
                        repr(r.gamma_or_sigma),
                        repr(r.n_elite_or_ess),
                        repr(r.pf_partial),
                        r.em_iters,
                        repr(r.wall_time_s),
                    ]
                )


# ---------------------------------------------------------------------------
# Elementary estimators

def quantile_threshold(costs, rho):
    """max(0, lower-interpolation rho-quantile of costs).

    The order statistic at 1-based index ceil(rho*n) breaks ties
    deterministically; zero signals the final stage.
    """
    costs = np.asarray(costs, dtype=float)
    n = costs.shape[0]
    if n < 1:
        raise ValueError("need at least one cost")
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    k = max(1, math.ceil(rho * n - 1e-9))
    gamma = float(np.partition(costs, k - 1)[k - 1])
    return max(0.0, gamma)


def _estimate_from_batch(costs, log_ratio, iterations=1, model=None, n_total=None):
    """Unnormalized IS estimate from one batch; cov_hat is the empirical
    coefficient of variation of the failure-weighted terms."""
    if not np.all(np.isfinite(log_ratio)):
        bad = int(np.flatnonzero(~np.isfinite(log_ratio))[0])
        raise SamplerError(f"non-finite importance weight for sample {bad}")
    n = costs.shape[0]
    terms = np.where(costs <= 0.0, np.exp(log_ratio), 0.0)
    if not np.all(np.isfinite(terms)):
        bad = int(np.flatnonzero(~np.isfinite(terms))[0])
        raise SamplerError(f"non-finite importance weight for sample {bad}")
    pf = float(np.mean(terms))
    if pf > 0:
        sd = float(np.std(terms))
        cov = sd / (math.sqrt(n) * pf)
    else:
        cov = math.nan
    return IsEstimate(
        pf_hat=pf,
        cov_hat=cov,
        n_total=n if n_total is None else n_total,
        iterations=iterations,
        model=model,
    )


def _chunked(n, chunk=200_000):
    start = 0
    while start < n:
        yield min(chunk, n - start)
        start += chunk


def is_estimate(problem, proposal, n, seed):
    """Importance-sampling estimate of the failure probability.

    Draws n points from the proposal, weighs failures by p/q.  With the
    prior itself as proposal the weights are exactly one and the result
    reduces to mc_estimate bit for bit (shared stream and chunking).
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    prior = StandardNormalPrior(problem.dim)
    rng = _seeding.stream(seed, _seeding.STAGE, 1)
    parts_costs, parts_ratio = [], []
    for m in _chunked(n):
        x = proposal.sample(m, rng)
        parts_costs.append(problem.cost(x))
        parts_ratio.append(prior.log_density(x) - proposal.log_density(x))
    costs = np.concatenate(parts_costs)
    log_ratio = np.concatenate(parts_ratio)
    return _estimate_from_batch(costs, log_ratio, model=proposal)


def mc_estimate(problem, n, seed):
    """Plain Monte Carlo estimate: prior sampling, indicator mean.

    Implemented as is_estimate with the prior as proposal; for indicator
    terms the empirical coefficient of variation equals
    sqrt((1 - pf) / (n * pf)).
    """
    prior = StandardNormalPrior(problem.dim)
    return is_estimate(problem, prior, n, seed)


# ---------------------------------------------------------------------------
# Cross-entropy driver

def cross_entropy_is(problem, cfg, seed):
    """Adaptive importance sampling with intermediate failure regions.

    Returns a RunResult whose n_total counts every cost evaluation.
    """
    counter = CountingProblem(problem)
    prior = StandardNormalPrior(counter.dim)
    em_cfg = config_for_dim(cfg.em, counter.dim)
    proposal = prior
    model = None
    prev_mean_ll = None
    trace = []
    estimate = None
    n = cfg.samples_per_stage

    for stage in range(1, cfg.max_stages + 1):
        t0 = time.perf_counter()
        rng = _seeding.stream(seed, _seeding.STAGE, stage)
        x = proposal.sample(n, rng)
        f = counter.cost(x)
        log_ratio = prior.log_density(x) - proposal.log_density(x)
        gamma = quantile_threshold(f, cfg.elite_quantile)
        elite = f <= gamma
        if not np.any(elite):
            raise SamplerError(f"empty elite set at stage {stage}")
        data = WeightedDataset(x[elite], np.exp(log_ratio[elite]))
        model, fit_trace = fit_family(
            cfg.family,
            data,
            em_cfg,
            rng=_seeding.stream(seed, _seeding.EM, stage),
            init_model=model if cfg.warm_start else None,
        )
        mean_ll = fit_trace.mean_loglik()
        pf_partial = float(np.mean(np.where(f <= 0, np.exp(log_ratio), 0.0)))
        trace.append(
            StageRecord(
                stage=stage,
                gamma_or_sigma=gamma,
                n_elite_or_ess=float(np.count_nonzero(elite)),
                pf_partial=pf_partial,
                em_iters=fit_trace.n_iters,
                wall_time_s=time.perf_counter() - t0,
            )
        )
        if gamma == 0.0:
            # Final stage: the threshold reached the failure region, so this
            # fresh batch (drawn from `proposal`, untouched by the refit)
            # provides the estimate; `model` keeps the failure-set refit.
            estimate = _estimate_from_batch(f, log_ratio, iterations=stage)
            break
        stalled = (
            prev_mean_ll is not None
            and abs(mean_ll - prev_mean_ll) <= cfg.loglik_rel_tol * abs(prev_mean_ll)
        )
        prev_mean_ll = mean_ll
        proposal = model
        if stalled:
            # Proposal stopped improving while gamma > 0: estimate from a
            # fresh batch under the newest model.
            estimate, x, f = _final_fresh_estimate(
                counter, prior, model, n, seed, stage, trace
            )
            break
    if estimate is None:
        stage = cfg.max_stages
        estimate, x, f = _final_fresh_estimate(
            counter, prior, model, n, seed, stage, trace
        )

    estimate.n_total = counter.n_evals
    estimate.model = model
    assert counter.n_evals == len(trace) * n, "cost evaluations escaped the audit"
    return RunResult(estimate=estimate, model=model, trace=trace, samples=x, costs=f)


def _final_fresh_estimate(counter, prior, model, n, seed, stage, trace):
    t0 = time.perf_counter()
    rng = _seeding.stream(seed, _seeding.STAGE, stage + 1)
    x = model.sample(n, rng)
    f = counter.cost(x)
    log_ratio = prior.log_density(x) - model.log_density(x)
    estimate = _estimate_from_batch(f, log_ratio, iterations=stage + 1)
    trace.append(
        StageRecord(
            stage=stage + 1,
            gamma_or_sigma=math.nan,
            n_elite_or_ess=float(np.count_nonzero(f <= 0)),
            pf_partial=estimate.pf_hat,
            em_iters=0,
            wall_time_s=time.perf_counter() - t0,
        )
    )
    return estimate, x, f


# ---------------------------------------------------------------------------
# Sequential importance sampling

def _log_smooth_indicator(costs, sigma):
    """log Phi(-f/sigma); the smoothed failure indicator."""
    return norm.logcdf(-costs / sigma)


def _incremental_cv(costs, sigma, log_prev):
    logw = _log_smooth_indicator(costs, sigma) - log_prev
    peak = np.max(logw)
    if np.isneginf(peak):
        return math.inf, logw
    w = np.exp(logw - peak)
    mean = float(np.mean(w))
    sd = float(np.std(w))
    return sd / mean, logw


def _bisect_sigma(costs, log_prev, sigma_hi, cfg):
    """Largest tempering step with CV(incremental weights) ~ target.

    CV decreases toward 0 as sigma -> sigma_hi; if even sigma_min stays
    below target the final level sigma_min is reached.
    """
    cv_min, _ = _incremental_cv(costs, cfg.sigma_min, log_prev)
    if cv_min <= cfg.weight_cv_target:
        return cfg.sigma_min
    lo, hi = math.log(cfg.sigma_min), math.log(sigma_hi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        cv, _ = _incremental_cv(costs, math.exp(mid), log_prev)
        if cv > cfg.weight_cv_target:
            lo = mid
        else:
            hi = mid
    return math.exp(hi)


def _conditional_mh_stage(counter, seeds_x, seeds_f, sigma, rho_c, burn_in, keep, rng):
    """Move chains with the conditional-sampling MH kernel.

    Candidate rho_c*x + sqrt(1-rho_c^2)*xi leaves the prior invariant, so
    the acceptance ratio reduces to Phi(-f'/sigma)/Phi(-f/sigma).  Returns
    the pooled post-burn-in states, their costs, and the acceptance rate.
    """
    cur_x = seeds_x.copy()
    cur_f = seeds_f.copy()
    cur_lp = _log_smooth_indicator(cur_f, sigma)
    comp = math.sqrt(1.0 - rho_c * rho_c)
    kept_x, kept_f = [], []
    accepted = 0
    total = 0
    for move in range(burn_in + keep):
        xi = rng.standard_normal(cur_x.shape)
        cand = rho_c * cur_x + comp * xi
        cand_f = counter.cost(cand)
        cand_lp = _log_smooth_indicator(cand_f, sigma)
        log_u = np.log(rng.random(cur_x.shape[0]))
        accept = log_u < (cand_lp - cur_lp)
        cur_x[accept] = cand[accept]
        cur_f[accept] = cand_f[accept]
        cur_lp[accept] = cand_lp[accept]
        accepted += int(np.count_nonzero(accept))
        total += accept.shape[0]
        if move >= burn_in:
            kept_x.append(cur_x.copy())
            kept_f.append(cur_f.copy())
    return np.concatenate(kept_x), np.concatenate(kept_f), accepted / total


def sequential_is(problem, cfg, seed):
    """Tempered-particle estimator with a final fitted-proposal batch.

    The reported pf_hat comes from an importance-sampling batch under the
    proposal fitted to the final particles; the telescoping product
    estimate appears per stage in the trace (pf_partial).
    """
    counter = CountingProblem(problem)
    prior = StandardNormalPrior(counter.dim)
    em_cfg = config_for_dim(cfg.em, counter.dim)
    n = cfg.samples_per_stage
    n_chains = n // cfg.samples_per_chain
    rng0 = _seeding.stream(seed, _seeding.STAGE, 0)
    x = prior.sample(n, rng0)
    f = counter.cost(x)

    log_prev = np.zeros(n)  # no smoothing yet: weights are Phi(-f/sigma_1)
    log_z = 0.0
    sigma = None
    sigma_hi = None
    rho_c = cfg.mh_correlation
    trace = []

    for stage in range(1, cfg.max_stages + 1):
        t0 = time.perf_counter()
        if sigma_hi is None:
            scale = float(np.mean(np.abs(f)) + 3.0 * np.std(f))
            sigma_hi = max(10.0 * scale, 1.0)
        sigma = _bisect_sigma(f, log_prev, sigma_hi, cfg)
        logw = _log_smooth_indicator(f, sigma) - log_prev
        if np.all(np.isneginf(logw)):
            raise SamplerError("tempering step too aggressive: zero incremental weights")
        # stage normalizing ratio Z_t/Z_{t-1}, computed stably
        peak = float(np.max(logw))
        w = np.exp(logw - peak)
        log_z += peak + math.log(float(np.mean(w)))
        ess = float(w.sum() ** 2 / np.sum(w * w))

        idx = _seeding.stream(seed, _seeding.RESAMPLE, stage).choice(
            n, size=n_chains, replace=True, p=w / w.sum()
        )
        x, f, acc_rate = _conditional_mh_stage(
            counter,
            x[idx],
            f[idx],
            sigma,
            rho_c,
            cfg.burn_in,
            cfg.samples_per_chain,
            _seeding.stream(seed, _seeding.MH, stage),
        )
        log_prev = _log_smooth_indicator(f, sigma)
        sigma_hi = sigma
        # acceptance targeting 0.44: larger rho_c means smaller moves
        if acc_rate < 0.44:
            rho_c = min(0.99, rho_c * 1.1)
        else:
            rho_c = max(0.1, rho_c * 0.9)
        corr = np.where(f <= 0, np.exp(-log_prev), 0.0)
        pf_partial = math.exp(log_z) * float(np.mean(corr))
        trace.append(
            StageRecord(
                stage=stage,
                gamma_or_sigma=sigma,
                n_elite_or_ess=ess,
                pf_partial=pf_partial,
                em_iters=0,
                wall_time_s=time.perf_counter() - t0,
            )
        )
        if sigma <= cfg.sigma_min:
            break

    stages_done = trace[-1].stage
    # fit the proposal to the final particles, importance-corrected to the
    # failure conditional; a failure-free population falls back to unit
    # weights so a model (and a ~0 estimate) is still produced
    corr = np.where(f <= 0, np.exp(-_log_smooth_indicator(f, sigma)), 0.0)
    fit_weights = corr if np.any(corr > 0) else np.ones_like(corr)
    t0 = time.perf_counter()
    model, fit_trace = fit_family(
        cfg.family,
        WeightedDataset(x, fit_weights),
        em_cfg,
        rng=_seeding.stream(seed, _seeding.EM, stages_done + 1),
    )
    rng_final = _seeding.stream(seed, _seeding.STAGE, stages_done + 1)
    xq = model.sample(n, rng_final)
    fq = counter.cost(xq)
    log_ratio = prior.log_density(xq) - model.log_density(xq)
    estimate = _estimate_from_batch(
        fq, log_ratio, iterations=stages_done + 1, model=model, n_total=counter.n_evals
    )
    trace.append(
        StageRecord(
            stage=stages_done + 1,
            gamma_or_sigma=float(sigma),
            n_elite_or_ess=float(np.count_nonzero(fq <= 0)),
            pf_partial=estimate.pf_hat,
            em_iters=fit_trace.n_iters,
            wall_time_s=time.perf_counter() - t0,
        )
    )
    expected = n + stages_done * n_chains * (cfg.burn_in + cfg.samples_per_chain) + n
    assert counter.n_evals == expected, "cost evaluations escaped the audit"
    return RunResult(estimate=estimate, model=model, trace=trace, samples=xq, costs=fq)
