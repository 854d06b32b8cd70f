"""Deterministic RNG stream derivation.

Every stochastic routine takes either an explicit ``numpy.random.Generator``
or an integer seed from which it derives private streams with
:func:`stream`.  Streams are keyed by (seed, *tags) through
``numpy.random.SeedSequence``, so two routines that share a (seed, tag) key
consume identical variates; this is what makes the q = p reduction of the
importance-sampling estimator to plain Monte Carlo exact, and what keeps
trial rows identical regardless of worker count.
"""

import numpy as np

# Stream tags. Stable across releases; changing them changes every result.
STAGE = 1       # per-stage sampling (stage index appended)
EM = 2          # per-stage EM initialization
RESAMPLE = 3    # SIS multinomial resampling
MH = 4          # SIS Metropolis-Hastings moves
METRICS = 5     # evaluation batches for metric computation
PLOT = 6        # scatter subsampling


def stream(seed, *tags):
    """Return a Generator for the given (seed, *tags) key."""
    key = (int(seed),) + tuple(int(t) for t in tags)
    if any(k < 0 for k in key):
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return np.random.default_rng(np.random.SeedSequence(key))


def trial_seed(master_seed, trial_index):
    """Derive an independent per-trial seed by mixing (master, trial)."""
    ss = np.random.SeedSequence((int(master_seed), int(trial_index)))
    return int(ss.generate_state(1, np.uint64)[0])
