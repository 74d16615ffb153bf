"""Targeted Bayesian estimation of the class proportion in unlabeled data."""

__version__ = "0.1.0"

from .bayes import (
    BetaPrior,
    McmcConfig,
    PosteriorSample,
    beta_from_moments,
    log_posterior_eps,
    sample_posterior,
    summarize,
    theta_map,
    theta_map_deriv,
)
from .data import Dataset, FoldAssignment, SamplingDesign, estimate_rho, load_csv, make_folds, write_csv
from .eif import clever_covariates, eif, plugin_theta, score_components, tilted_plugin_theta
from .nuisance import NuisanceSpec, fit_cross_fitted, fit_full_sample, fit_logistic, predict_proba
from .sim import StudyConfig, efficiency_bound, generate, oracle_values, run_study, true_theta
from .tmle import SubmodelState, TargetedFit, fit_epsilon, fluctuate, run_tmle

__all__ = [
    "BetaPrior",
    "Dataset",
    "FoldAssignment",
    "McmcConfig",
    "NuisanceSpec",
    "PosteriorSample",
    "SamplingDesign",
    "StudyConfig",
    "SubmodelState",
    "TargetedFit",
    "beta_from_moments",
    "clever_covariates",
    "efficiency_bound",
    "eif",
    "estimate_rho",
    "fit_cross_fitted",
    "fit_epsilon",
    "fit_full_sample",
    "fit_logistic",
    "fluctuate",
    "generate",
    "load_csv",
    "log_posterior_eps",
    "make_folds",
    "oracle_values",
    "plugin_theta",
    "predict_proba",
    "run_study",
    "run_tmle",
    "sample_posterior",
    "score_components",
    "summarize",
    "theta_map",
    "theta_map_deriv",
    "tilted_plugin_theta",
    "true_theta",
    "write_csv",
]
