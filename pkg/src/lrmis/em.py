"""Importance-weighted expectation-maximization for the proposal families.

The E-step computes responsibilities that sum to the likelihood ratio w_n
per point (not to 1); the M-step ratios then cancel any global weight
scale.  For the low-rank family the per-component M-step solves the
probabilistic-PCA maximum-likelihood problem exactly by truncated
eigendecomposition of the responsibility-weighted scatter: the noise
variance is the mean of the d-l smallest eigenvalues and the loading
columns span the top-l eigenspace.  All reductions run in fixed
sample-index order, so fits are reproducible bit for bit.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import _cluster
from .density import (
    DEFAULT_SIGMA2_FLOOR,
    GmmComponent,
    GmmModel,
    MppcaComponent,
    MppcaModel,
)


@dataclass(frozen=True)
class WeightedDataset:
    """Points with non-negative importance weights w_n = p(x_n)/q(x_n)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=float)
        weights = np.ascontiguousarray(self.weights, dtype=float)
        if points.ndim != 2 or points.shape[0] < 1:
            raise ValueError("points must be a non-empty (N, d) array")
        if weights.shape != (points.shape[0],):
            raise ValueError("one weight per point required")
        if not np.all(np.isfinite(points)):
            raise ValueError("points must be finite")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("weights must be finite and >= 0")
        if not np.any(weights > 0):
            raise ValueError("at least one weight must be positive")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def effective_sample_size(self):
        w = self.weights
        return float(w.sum() ** 2 / np.sum(w * w))


@dataclass(frozen=True)
class EmConfig:
    """EM hyperparameters; mixture size and latent rank default to 8."""

    n_components: int = 8
    latent_dim: int = 8
    max_iters: int = 200
    rel_tol: float = 1e-5
    sigma2_floor: float = DEFAULT_SIGMA2_FLOOR
    weight_floor: float = 1e-8
    init: str = "kmeans"  # or "random-responsibility"
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("need at least one component")
        if self.latent_dim < 1:
            raise ValueError("latent dimension must be >= 1")
        if self.init not in ("kmeans", "random-responsibility"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class FitTrace:
    """Per-iteration record of the weighted objective and floors."""

    iterations: list = field(default_factory=list)  # (iter, L_w, min pi, min s2)
    final_loglik: float = math.nan
    weight_sum: float = math.nan
    n_iters: int = 0

    def append(self, iteration, loglik, min_weight, min_sigma2):
        self.iterations.append((iteration, loglik, min_weight, min_sigma2))

    def mean_loglik(self):
        """Final weighted log-likelihood per unit weight."""
        return self.final_loglik / self.weight_sum

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "loglik", "min_weight", "min_sigma2"])
            for row in self.iterations:
                writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def _log_responsibility_parts(model, data):
    ld = model.component_log_densities(data.points)
    with np.errstate(divide="ignore"):
        log_num = ld + np.log(model.weights)[None, :]
    lse = logsumexp(log_num, axis=1)
    dead = np.isneginf(lse) & (data.weights > 0)
    if np.any(dead):
        idx = np.flatnonzero(dead)[:10].tolist()
        raise FloatingPointError(
            f"points {idx} have zero density under every component"
        )
    return log_num, lse


def responsibilities(model, data):
    """r_nk = w_n * pi_k q(x_n|k) / sum_j pi_j q(x_n|j), in log space.

    Rows with w_n = 0 are identically zero.
    """
    if data.dim != model.dim:
        raise ValueError("model and data dimensions disagree")
    log_num, lse = _log_responsibility_parts(model, data)
    r = np.exp(log_num - lse[:, None])
    r *= data.weights[:, None]
    r[data.weights == 0] = 0.0
    return r


def _weighted_scatter(points, r_k, total):
    mu = (r_k @ points) / total
    g = (points - mu) * np.sqrt(r_k)[:, None]
    return mu, (g.T @ g) / total


def _mppca_mstep_component(scatter, latent_dim, sigma2_floor):
    d = scatter.shape[0]
    evals, evecs = np.linalg.eigh(scatter)
    evals = np.clip(evals[::-1], 0.0, None)  # descending
    evecs = evecs[:, ::-1]
    sigma2 = max(float(np.mean(evals[latent_dim:])), sigma2_floor)
    gain = np.sqrt(np.clip(evals[:latent_dim] - sigma2, 0.0, None))
    loading = evecs[:, :latent_dim] * gain[None, :]
    return loading, sigma2


def _hard_responsibilities(assign, weights, k):
    r = np.zeros((weights.shape[0], k))
    r[np.arange(weights.shape[0]), assign] = weights
    return r


def _init_responsibilities(data, cfg, rng, init_assignment=None):
    k = cfg.n_components
    if init_assignment is not None:
        assign = np.asarray(init_assignment, dtype=int)
        if assign.shape != (data.n,) or assign.min() < 0 or assign.max() >= k:
            raise ValueError("initialization assignment inconsistent with data/K")
        return _hard_responsibilities(assign, data.weights, k)
    if cfg.init == "kmeans":
        _, assign = _cluster.kmeans(
            data.points, k, rng, n_iters=10, weights=data.weights
        )
        return _hard_responsibilities(assign, data.weights, k)
    # random-responsibility: random soft row-stochastic matrix scaled by w_n
    soft = rng.random((data.n, k)) + 1e-3
    soft /= soft.sum(axis=1, keepdims=True)
    return soft * data.weights[:, None]


class _MppcaFamily:
    def __init__(self, cfg, dim):
        if cfg.latent_dim >= dim:
            raise ValueError(
                f"latent dimension {cfg.latent_dim} must be < data dimension {dim}"
            )
        self.cfg = cfg

    def component_from_scatter(self, mu, scatter):
        loading, sigma2 = _mppca_mstep_component(
            scatter, self.cfg.latent_dim, self.cfg.sigma2_floor
        )
        return MppcaComponent(mu, loading, sigma2, sigma2_floor=self.cfg.sigma2_floor)

    def broad_component(self, mu, variance):
        d = mu.shape[0]
        sigma2 = max(variance, self.cfg.sigma2_floor)
        loading = np.zeros((d, self.cfg.latent_dim))
        return MppcaComponent(mu, loading, sigma2, sigma2_floor=self.cfg.sigma2_floor)

    def build(self, components, weights):
        return MppcaModel(tuple(components), np.asarray(weights))

    @staticmethod
    def min_sigma2(model):
        return min(c.noise_var for c in model.components)


class _GmmFamily:
    def __init__(self, cfg, dim):
        self.cfg = cfg

    def component_from_scatter(self, mu, scatter):
        return GmmComponent(mu, scatter)

    def broad_component(self, mu, variance):
        d = mu.shape[0]
        return GmmComponent(mu, max(variance, self.cfg.sigma2_floor) * np.eye(d))

    def build(self, components, weights):
        return GmmModel(tuple(components), np.asarray(weights))

    @staticmethod
    def min_sigma2(model):
        return min(float(np.min(np.diag(c.cov))) for c in model.components)


def _mstep(family, data, r, respawn_counts, rng):
    """One M-step; collapsed components are respawned once, then dropped.

    respawn_counts is a per-current-component list; the returned list is
    re-indexed to the surviving components.
    """
    w_total = data.weights.sum()
    floor = family.cfg.weight_floor * w_total
    k = r.shape[1]
    masses = r.sum(axis=0)
    comps, weights, new_counts = [], [], []
    global_var = None
    for j in range(k):
        if masses[j] < max(floor, 1e-300):
            if respawn_counts[j] > 0:
                continue  # drop for good; weights renormalize below
            if global_var is None:
                wm = data.weights @ data.points / w_total
                global_var = float(
                    np.mean(data.weights @ (data.points - wm) ** 2 / w_total)
                )
            idx = rng.choice(data.n, p=data.weights / w_total)
            comps.append(family.broad_component(data.points[idx].copy(), global_var))
            weights.append(w_total / k)
            new_counts.append(1)
            continue
        mu, scatter = _weighted_scatter(data.points, r[:, j], masses[j])
        comps.append(family.component_from_scatter(mu, scatter))
        weights.append(masses[j])
        new_counts.append(respawn_counts[j])
    if not comps:
        raise FloatingPointError("every mixture component collapsed")
    weights = np.asarray(weights)
    weights = weights / weights.sum()
    return family.build(comps, weights), new_counts


def _fit(family_cls, data, cfg, rng=None, init_model=None, init_assignment=None):
    if data.n < cfg.n_components:
        raise ValueError(
            f"need at least K={cfg.n_components} points, got {data.n}"
        )
    ess = data.effective_sample_size()
    if ess < cfg.n_components:
        warnings.warn(
            f"effective sample size {ess:.1f} below K={cfg.n_components}; "
            "fit may be unreliable",
            stacklevel=3,
        )
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    family = family_cls(cfg, data.dim)
    trace = FitTrace(weight_sum=float(data.weights.sum()))

    if init_model is None:
        r = _init_responsibilities(data, cfg, rng, init_assignment)
        model, respawn_counts = _mstep(
            family, data, r, [0] * cfg.n_components, rng
        )
    else:
        if init_model.dim != data.dim:
            raise ValueError("warm-start model dimension disagrees with data")
        model = init_model
        respawn_counts = [0] * model.n_components

    prev = -math.inf
    it = 0
    while True:
        log_num, lse = _log_responsibility_parts(model, data)
        loglik = float(data.weights @ lse)
        it += 1
        trace.append(it, loglik, float(np.min(model.weights)), family.min_sigma2(model))
        converged = it > 1 and loglik - prev <= cfg.rel_tol * abs(prev)
        if converged or it > cfg.max_iters:
            break
        prev = loglik
        r = np.exp(log_num - lse[:, None]) * data.weights[:, None]
        r[data.weights == 0] = 0.0
        model, respawn_counts = _mstep(family, data, r, respawn_counts, rng)
    trace.n_iters = len(trace.iterations)
    trace.final_loglik = trace.iterations[-1][1]
    return model, trace


def fit_mppca(data, cfg, rng=None, init_model=None, init_assignment=None):
    """Fit a low-rank mixture by importance-weighted EM.

    Args:
        data: WeightedDataset of points and likelihood ratios.
        cfg: EmConfig; latent_dim must be < data dimension.
        rng: optional Generator; defaults to one seeded from cfg.seed.
        init_model: warm-start model (skips kmeans initialization).
        init_assignment: explicit initial hard assignment (testing hook).

    Returns:
        (MppcaModel, FitTrace); the trace's loglik column is the weighted
        objective sum_n w_n log sum_k pi_k q(x_n|k), non-decreasing across
        iterations.
    """
    return _fit(_MppcaFamily, data, cfg, rng, init_model, init_assignment)


def fit_gmm(data, cfg, rng=None, init_model=None, init_assignment=None):
    """Fit a full-covariance Gaussian mixture by importance-weighted EM."""
    return _fit(_GmmFamily, data, cfg, rng, init_model, init_assignment)


def fit_family(family, data, cfg, rng=None, init_model=None):
    if family == "mppca":
        return fit_mppca(data, cfg, rng=rng, init_model=init_model)
    if family == "gmm":
        return fit_gmm(data, cfg, rng=rng, init_model=init_model)
    raise ValueError(f"unknown model family {family!r}")


def config_for_dim(cfg, dim):
    """Clamp the latent dimension for low-dimensional problems."""
    if cfg.latent_dim < dim:
        return cfg
    return replace(cfg, latent_dim=dim - 1)
