"""Rare-event importance sampling with low-rank mixture proposals."""

from .density import (
    GmmComponent,
    GmmModel,
    MppcaComponent,
    MppcaModel,
    StandardNormalPrior,
    mixture_log_density,
    model_from_json,
    model_to_json,
)
from .em import EmConfig, WeightedDataset, fit_gmm, fit_mppca, responsibilities
from .metrics import (
    MetricReport,
    ReferenceSet,
    avg_nll,
    build_reference_set,
    coverage,
    ndb,
    relative_error,
)
from .problems import (
    BranchesParams,
    DuffingParams,
    branches_cost,
    branches_problem,
    branches_reference_pf,
    duffing_cost,
    duffing_problem,
    external_problem,
)
from .samplers import (
    CeConfig,
    CountingProblem,
    IsEstimate,
    RunResult,
    SisConfig,
    cross_entropy_is,
    is_estimate,
    mc_estimate,
    quantile_threshold,
    sequential_is,
)

__version__ = "0.1.0"

__all__ = [
    "BranchesParams",
    "CeConfig",
    "CountingProblem",
    "DuffingParams",
    "EmConfig",
    "GmmComponent",
    "GmmModel",
    "IsEstimate",
    "MetricReport",
    "MppcaComponent",
    "MppcaModel",
    "ReferenceSet",
    "RunResult",
    "SisConfig",
    "StandardNormalPrior",
    "WeightedDataset",
    "avg_nll",
    "branches_cost",
    "branches_problem",
    "branches_reference_pf",
    "build_reference_set",
    "coverage",
    "cross_entropy_is",
    "duffing_cost",
    "duffing_problem",
    "external_problem",
    "fit_gmm",
    "fit_mppca",
    "is_estimate",
    "mc_estimate",
    "mixture_log_density",
    "model_from_json",
    "model_to_json",
    "ndb",
    "quantile_threshold",
    "relative_error",
    "responsibilities",
    "sequential_is",
]
