"""Component-wise likelihood boosting for linear mixed models.

Estimates Gaussian linear mixed models by boosting one fixed effect per
iteration, with weak, disentangled random-effects updates that are kept
orthogonal to cluster-constant covariates.  Includes cluster-wise k-fold
cross-validation for early stopping, a direct maximum-likelihood fitter,
a simulation harness and a CSV-based CLI.
"""

from .crossval import CvCurve, FoldPlan, cv_criterion, cv_curve, cv_select, partition_clusters
from .dataio import export_results, ingest_csv, standardize_dataset
from .engine import (
    BoostConfig,
    BoostTrace,
    CandidateUpdate,
    boost_fit,
    correct_random_effects,
    fixed_effects_step,
    init_state,
    random_effects_update,
    update_Q,
    update_sigma2,
)
from .errors import ConvergenceError, DataError, NumericError, SingularMatrixError
from .mle import MarginalModel, marginal_loglik, ml_fit
from .model import (
    CorrectionOperator,
    Dataset,
    ParamState,
    build_correction,
    conditional_loglik,
    detect_cluster_constant,
    linear_predictor,
    make_dataset,
    penalized_loglik,
    penalized_score,
    subset_clusters,
)
from .simulate import SimDesign, SimMetrics, false_positives, gen_dataset, run_study

__version__ = "0.1.0"

__all__ = [
    "BoostConfig",
    "BoostTrace",
    "CandidateUpdate",
    "ConvergenceError",
    "CorrectionOperator",
    "CvCurve",
    "DataError",
    "Dataset",
    "FoldPlan",
    "MarginalModel",
    "NumericError",
    "ParamState",
    "SimDesign",
    "SimMetrics",
    "SingularMatrixError",
    "boost_fit",
    "build_correction",
    "conditional_loglik",
    "correct_random_effects",
    "cv_criterion",
    "cv_curve",
    "cv_select",
    "detect_cluster_constant",
    "export_results",
    "false_positives",
    "fixed_effects_step",
    "gen_dataset",
    "ingest_csv",
    "init_state",
    "linear_predictor",
    "make_dataset",
    "marginal_loglik",
    "ml_fit",
    "partition_clusters",
    "penalized_loglik",
    "penalized_score",
    "random_effects_update",
    "run_study",
    "standardize_dataset",
    "subset_clusters",
    "update_Q",
    "update_sigma2",
]
