"""Exact log-densities and sampling for the proposal families.

Three families share one duck-typed interface (``dim``, ``log_density``,
``sample``): the standard-normal prior, low-rank mixtures (each component a
Gaussian with covariance sigma2*I + W W^T evaluated through the Woodbury and
matrix-determinant identities at O(d*l^2) per point), and full-covariance
Gaussian mixtures evaluated through Cholesky factors.

Models are immutable after construction and safe to share across threads;
sampling always requires an explicit Generator.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)

DEFAULT_SIGMA2_FLOOR = 1e-6
GMM_RIDGE_SCALE = 1e-6
_WEIGHT_SUM_TOL = 1e-12
_SYM_TOL = 1e-10


def _as_matrix(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != d:
            raise ValueError(f"expected a point of dimension {d}, got {x.shape[0]}")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {x.shape}")
    return x, False


def _check_mixture_weights(weights, n_components):
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n_components,):
        raise ValueError("one mixing weight per component required")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ValueError("mixing weights must be finite and non-negative")
    total = weights.sum()
    if abs(total - 1.0) > _WEIGHT_SUM_TOL:
        raise ValueError(f"mixing weights must sum to 1 within {_WEIGHT_SUM_TOL}, got {total!r}")
    if total == 0.0:
        raise ValueError("all mixing weights are zero")
    return weights


@dataclass(frozen=True)
class StandardNormalPrior:
    """Standard multivariate normal N(0, I_d); the sampling-space prior."""

    dim: int

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"prior dimension must be >= 2, got {self.dim}")

    def log_density(self, x):
        x, single = _as_matrix(x, self.dim)
        out = -0.5 * (self.dim * LOG_2PI + np.einsum("nd,nd->n", x, x))
        return float(out[0]) if single else out

    def sample(self, n, rng):
        if n < 1:
            raise ValueError("need n >= 1 samples")
        return rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class MppcaComponent:
    """One probabilistic principal component analyzer.

    The implied Gaussian has mean `mean` and covariance
    noise_var * I + loading @ loading.T with `loading` of shape (d, l),
    1 <= l < d.
    """

    mean: np.ndarray
    loading: np.ndarray
    noise_var: float
    sigma2_floor: float = DEFAULT_SIGMA2_FLOOR

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        loading = np.asarray(self.loading, dtype=float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "loading", loading)
        object.__setattr__(self, "noise_var", float(self.noise_var))
        if mean.ndim != 1 or loading.ndim != 2 or loading.shape[0] != mean.shape[0]:
            raise ValueError("mean (d,) and loading (d, l) shapes disagree")
        d, l = loading.shape
        if not (1 <= l < d):
            raise ValueError(f"latent dimension must satisfy 1 <= l < d, got l={l}, d={d}")
        if self.noise_var < self.sigma2_floor:
            raise ValueError(
                f"noise variance {self.noise_var!r} below floor {self.sigma2_floor!r}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(loading))):
            raise ValueError("component parameters must be finite")
        mean.setflags(write=False)
        loading.setflags(write=False)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def latent_dim(self):
        return self.loading.shape[1]

    def covariance(self):
        """Dense d x d covariance (for tests and small-d use)."""
        return self.noise_var * np.eye(self.dim) + self.loading @ self.loading.T


def mppca_component_log_density(component, x, index=None):
    """Log N(x; mean, noise_var*I + W W^T) via the low-rank identities.

    Uses inv(C) = (I - W inv(M) W^T)/sigma2 and
    log|C| = (d - l) log sigma2 + log|M| with M = sigma2*I_l + W^T W.
    """
    x, single = _as_matrix(x, component.dim)
    d, l = component.loading.shape
    s2 = component.noise_var
    W = component.loading
    M = s2 * np.eye(l) + W.T @ W
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        where = f" (component {index})" if index is not None else ""
        raise FloatingPointError(f"latent Gram matrix not invertible{where}") from exc
    delta = x - component.mean
    t = delta @ W
    u = solve_triangular(L, t.T, lower=True)
    quad = (np.einsum("nd,nd->n", delta, delta) - np.einsum("ln,ln->n", u, u)) / s2
    logdet = (d - l) * math.log(s2) + 2.0 * np.sum(np.log(np.diag(L)))
    out = -0.5 * (d * LOG_2PI + logdet + quad)
    # -inf is a legitimate underflow; only NaN/+inf signal a broken component
    if np.any(np.isnan(out)) or np.any(np.isposinf(out)):
        where = f" component {index}" if index is not None else ""
        raise FloatingPointError(f"non-finite log-density from{where or ' component'}")
    return float(out[0]) if single else out


@dataclass(frozen=True)
class MppcaModel:
    """Mixture of probabilistic principal component analyzers."""

    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("mixture needs at least one component")
        weights = _check_mixture_weights(self.weights, len(comps))
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        d, l = comps[0].dim, comps[0].latent_dim
        for c in comps:
            if c.dim != d or c.latent_dim != l:
                raise ValueError("all components must share the same d and l")

    @property
    def dim(self):
        return self.components[0].dim

    @property
    def latent_dim(self):
        return self.components[0].latent_dim

    @property
    def n_components(self):
        return len(self.components)

    def component_log_densities(self, x):
        """(n, K) matrix of per-component log-densities."""
        x, _ = _as_matrix(x, self.dim)
        cols = [
            mppca_component_log_density(c, x, index=k)
            for k, c in enumerate(self.components)
        ]
        return np.stack(cols, axis=1)

    def log_density(self, x):
        x_mat, single = _as_matrix(x, self.dim)
        out = mixture_log_density_from_parts(
            self.component_log_densities(x_mat), self.weights
        )
        return float(out[0]) if single else out

    def sample(self, n, rng):
        """Draw W_k z + mean_k + eps with k ~ Categorical(weights)."""
        if n < 1:
            raise ValueError("need n >= 1 samples")
        ks = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.latent_dim))
        eps = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k, c in enumerate(self.components):
            rows = np.flatnonzero(ks == k)
            if rows.size:
                out[rows] = (
                    z[rows] @ c.loading.T
                    + c.mean
                    + math.sqrt(c.noise_var) * eps[rows]
                )
        return out

    def mixture_mean(self):
        return sum(w * c.mean for w, c in zip(self.weights, self.components))


def mixture_log_density_from_parts(component_log_densities, weights):
    """Stable log sum_k pi_k exp(ld_nk); max-subtracted via logsumexp."""
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logsumexp(component_log_densities + logw[None, :], axis=1)


def mixture_log_density(model, x):
    """Mixture log-density; works for MPPCA and GMM models alike."""
    return model.log_density(x)


@dataclass(frozen=True)
class GmmComponent:
    """Full-covariance Gaussian component.

    The stored covariance must be symmetric within 1e-10; a ridge of
    1e-6 * trace(cov)/d is added before Cholesky factorization, so the
    effective density covariance is cov + ridge*I.
    """

    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("mean (d,) and cov (d, d) shapes disagree")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("component parameters must be finite")
        asym = np.max(np.abs(cov - cov.T)) if cov.size else 0.0
        if asym > _SYM_TOL:
            raise ValueError(f"covariance asymmetric by {asym!r} (> {_SYM_TOL})")
        cov = 0.5 * (cov + cov.T)
        d = mean.shape[0]
        ridge = GMM_RIDGE_SCALE * np.trace(cov) / d
        try:
            chol = np.linalg.cholesky(cov + ridge * np.eye(d))
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance not positive-definite after ridge") from exc
        mean.setflags(write=False)
        cov.setflags(write=False)
        chol.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self):
        return self.mean.shape[0]

    def log_density(self, x):
        x, single = _as_matrix(x, self.dim)
        delta = x - self.mean
        u = solve_triangular(self._chol, delta.T, lower=True)
        quad = np.einsum("dn,dn->n", u, u)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        out = -0.5 * (self.dim * LOG_2PI + logdet + quad)
        return float(out[0]) if single else out


@dataclass(frozen=True)
class GmmModel:
    """Full-covariance Gaussian mixture baseline proposal."""

    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("mixture needs at least one component")
        weights = _check_mixture_weights(self.weights, len(comps))
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        d = comps[0].dim
        if any(c.dim != d for c in comps):
            raise ValueError("all components must share the same d")

    @property
    def dim(self):
        return self.components[0].dim

    @property
    def n_components(self):
        return len(self.components)

    def component_log_densities(self, x):
        x, _ = _as_matrix(x, self.dim)
        return np.stack([c.log_density(x) for c in self.components], axis=1)

    def log_density(self, x):
        x_mat, single = _as_matrix(x, self.dim)
        out = mixture_log_density_from_parts(
            self.component_log_densities(x_mat), self.weights
        )
        return float(out[0]) if single else out

    def sample(self, n, rng):
        if n < 1:
            raise ValueError("need n >= 1 samples")
        ks = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k, c in enumerate(self.components):
            rows = np.flatnonzero(ks == k)
            if rows.size:
                out[rows] = z[rows] @ c._chol.T + c.mean
        return out

    def mixture_mean(self):
        return sum(w * c.mean for w, c in zip(self.weights, self.components))


def prior_log_density(prior, x):
    return prior.log_density(x)


def mppca_sample(model, n, rng):
    return model.sample(n, rng)


def gmm_sample(model, n, rng):
    return model.sample(n, rng)


def gmm_log_density(model, x):
    return model.log_density(x)


# ---------------------------------------------------------------------------
# JSON serialization. Round-trips are bit-exact for finite doubles because
# json encodes floats with repr (shortest round-trip decimals).


def model_to_dict(model):
    if isinstance(model, MppcaModel):
        return {
            "type": "mppca",
            "d": model.dim,
            "l": model.latent_dim,
            "weights": model.weights.tolist(),
            "components": [
                {
                    "mu": c.mean.tolist(),
                    "W": c.loading.tolist(),
                    "sigma2": c.noise_var,
                }
                for c in model.components
            ],
        }
    if isinstance(model, GmmModel):
        return {
            "type": "gmm",
            "d": model.dim,
            "l": None,
            "weights": model.weights.tolist(),
            "components": [
                {"mu": c.mean.tolist(), "cov": c.cov.tolist()}
                for c in model.components
            ],
        }
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_dict(doc):
    kind = doc.get("type")
    weights = np.asarray(doc["weights"], dtype=float)
    if kind == "mppca":
        comps = tuple(
            MppcaComponent(
                mean=np.asarray(c["mu"], dtype=float),
                loading=np.asarray(c["W"], dtype=float),
                noise_var=float(c["sigma2"]),
            )
            for c in doc["components"]
        )
        model = MppcaModel(comps, weights)
    elif kind == "gmm":
        comps = tuple(
            GmmComponent(
                mean=np.asarray(c["mu"], dtype=float),
                cov=np.asarray(c["cov"], dtype=float),
            )
            for c in doc["components"]
        )
        model = GmmModel(comps, weights)
    else:
        raise ValueError(f"unknown model type {kind!r}")
    if model.dim != doc["d"]:
        raise ValueError("declared dimension disagrees with components")
    return model


def model_to_json(model):
    return json.dumps(model_to_dict(model))


def model_from_json(text):
    return model_from_dict(json.loads(text))
