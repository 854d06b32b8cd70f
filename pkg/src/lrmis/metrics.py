"""Quality metrics for learned proposals against reference failure samples.

All metrics are pure functions of their inputs and invariant to row order.
Distances are Euclidean and neighbor computations are exact (O(M^2), block
processed to bound memory).
"""

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import norm

from . import _cluster

_MAGIC = b"RSET1"


@dataclass
class MetricReport:
    rel_error: float
    avg_nll: float
    coverage: float
    ndb_ratio: float
    n_total: int

    def __post_init__(self):
        for name in ("coverage", "ndb_ratio"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v!r}")


def relative_error(pf_hat, pf_ref):
    """(pf_hat - pf_ref)/pf_ref; positive means overestimate."""
    if pf_ref <= 0:
        raise ValueError("reference probability must be positive")
    return (pf_hat - pf_ref) / pf_ref


def avg_nll(samples, prior):
    """Mean negative log-density of the samples under the prior."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError("need a non-empty (n, d) batch")
    return float(np.mean(-prior.log_density(samples)))


def coverage(real_set, gen_set, k=5, block=1024):
    """Fraction of real points whose k-NN ball contains a generated point.

    A real point is covered when its distance to the nearest generated
    point is <= its distance to its k-th nearest real neighbor.
    """
    real = np.asarray(real_set, dtype=float)
    gen = np.asarray(gen_set, dtype=float)
    m = real.shape[0]
    if m <= k:
        raise ValueError(f"need more than k={k} real points, got {m}")
    covered = 0
    for start in range(0, m, block):
        rows = real[start : start + block]
        d_real = cdist(rows, real)
        # position k includes the zero self-distance at position 0
        radius = np.partition(d_real, k, axis=1)[:, k]
        d_gen = cdist(rows, gen).min(axis=1)
        covered += int(np.count_nonzero(d_gen <= radius))
    return covered / m


def ndb(real_set, gen_set, n_bins=50, alpha=0.05, seed=0):
    """Number of statistically different bins and its ratio NDB/C.

    Bins are k-means clusters of the real set (seeded, 50 iterations);
    both sets are assigned to nearest centroids and each bin gets a pooled
    two-proportion z-test at level alpha (two-sided).
    """
    real = np.asarray(real_set, dtype=float)
    gen = np.asarray(gen_set, dtype=float)
    if real.shape[0] < 1 or gen.shape[0] < 1:
        raise ValueError("both sample sets must be non-empty")
    if n_bins < 2:
        raise ValueError("need at least two bins")
    rng = np.random.default_rng(seed)
    k = min(n_bins, real.shape[0])
    # canonicalize row order so the seeded binning depends only on the set
    canon = real[np.lexsort(real.T[::-1])]
    centers, _ = _cluster.kmeans(canon, k, rng, n_iters=50)
    r_assign = np.argmin(cdist(real, centers, metric="sqeuclidean"), axis=1)
    g_assign = np.argmin(cdist(gen, centers, metric="sqeuclidean"), axis=1)
    n_r, n_g = real.shape[0], gen.shape[0]
    crit = norm.ppf(1.0 - alpha / 2.0)
    different = 0
    for j in range(k):
        c_r = int(np.count_nonzero(r_assign == j))
        c_g = int(np.count_nonzero(g_assign == j))
        pooled = (c_r + c_g) / (n_r + n_g)
        se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n_r + 1.0 / n_g))
        if se == 0.0:
            continue
        z = (c_r / n_r - c_g / n_g) / se
        if abs(z) > crit:
            different += 1
    return different, different / k


# ---------------------------------------------------------------------------
# Reference sets: failure samples from a long prior Monte Carlo run plus the
# reference failure probability, cached in a binary file with a JSON sidecar.


@dataclass
class ReferenceSet:
    points: np.ndarray
    pf_ref: float
    problem_name: str
    seed: int
    n_samples: int

    @property
    def dim(self):
        return self.points.shape[1]

    def save(self, path):
        path = str(path)
        points = np.ascontiguousarray(self.points, dtype="<f8")
        m, d = points.shape
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<QQ", d, m))
            fh.write(points.tobytes())
        sidecar = {
            "problem": self.problem_name,
            "seed": self.seed,
            "pf_ref": self.pf_ref,
            "n_samples": self.n_samples,
        }
        with open(path + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        path = str(path)
        with open(path, "rb") as fh:
            magic = fh.read(5)
            if magic != _MAGIC:
                raise ValueError(f"not a reference-set file: magic {magic!r}")
            d, m = struct.unpack("<QQ", fh.read(16))
            data = np.frombuffer(fh.read(8 * d * m), dtype="<f8").reshape(m, d)
        with open(path + ".json") as fh:
            sidecar = json.load(fh)
        return cls(
            points=data.copy(),
            pf_ref=float(sidecar["pf_ref"]),
            problem_name=sidecar["problem"],
            seed=int(sidecar["seed"]),
            n_samples=int(sidecar["n_samples"]),
        )


def _reference_shard(problem, n_samples, seed, shard, max_keep, chunk):
    from .density import StandardNormalPrior
    from ._seeding import stream, STAGE

    prior = StandardNormalPrior(problem.dim)
    rng = stream(seed, STAGE, shard)
    kept = []
    kept_count = 0
    failures = 0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        x = prior.sample(m, rng)
        f = problem.cost(x)
        mask = f <= 0
        failures += int(np.count_nonzero(mask))
        if kept_count < max_keep and np.any(mask):
            take = x[mask][: max_keep - kept_count]
            kept.append(take)
            kept_count += take.shape[0]
        done += m
    points = np.concatenate(kept) if kept else np.empty((0, problem.dim))
    return failures, points


def _shard_worker(payload):
    factory, args, n_samples, seed, shard, max_keep, chunk = payload
    problem = factory(*args)
    return _reference_shard(problem, n_samples, seed, shard, max_keep, chunk)


def build_reference_set(
    problem,
    n_samples,
    seed,
    max_keep=10000,
    chunk=200_000,
    workers=1,
    problem_factory=None,
):
    """Long Monte Carlo run keeping up to max_keep failure samples.

    pf_ref is the Monte Carlo estimate over the full run; stored rows all
    satisfy cost <= 0.  With workers > 1 the run splits into one seeded
    shard per worker process (problem_factory = (callable, args) rebuilds
    the problem in each worker); shard results merge in shard order, so
    the output is deterministic for a fixed (seed, workers).
    """
    if workers <= 1 or problem_factory is None:
        failures, points = _reference_shard(
            problem, n_samples, seed, 1, max_keep, chunk
        )
    else:
        from concurrent.futures import ProcessPoolExecutor

        factory, args = problem_factory
        per = [n_samples // workers] * workers
        per[0] += n_samples - sum(per)
        payloads = [
            (factory, args, per[i], seed, i + 1, max_keep, chunk)
            for i in range(workers)
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            shards = list(pool.map(_shard_worker, payloads))
        failures = sum(s[0] for s in shards)
        points = np.concatenate([s[1] for s in shards])[:max_keep]
    return ReferenceSet(
        points=points,
        pf_ref=failures / n_samples,
        problem_name=problem.name,
        seed=seed,
        n_samples=n_samples,
    )
