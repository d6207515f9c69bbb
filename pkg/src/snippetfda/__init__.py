"""Mean and covariance estimation for functional snippets by basis expansion."""

from .basis import BasisKind, BasisSpec, GramMatrices, make_basis
from .covfit import (
    CovDesign,
    CovFit,
    CovTuningResult,
    NewtonOptions,
    eval_cov,
    exp_map,
    family_check,
    gradient,
    hessian,
    init_point,
    newton_fit,
    objective,
    precompute_design,
    select_cov_tuning,
)
from .data import RawCovariances, Scheme, SnippetDataset, Subject, estimate_delta, load_csv, raw_covariances, write_csv
from .exceptions import DataError, NumericalError
from .experiments import ExperimentConfig, ExperimentFailure, ExperimentResult, MiseResult, mise_cov, mise_mean, run_experiment
from .fpca import EigenSystem, eigenpairs, variance_fractions
from .mean import MeanCVResult, MeanFit, cv_select_mean, eval_mean, fit_mean
from .pilot import PilotEstimate, pilot_covariance
from .simulation import CovScenario, MeanScenario, SimulationScenario, noise_variance, scenario_covariance, scenario_mean, simulate

__version__ = "0.1.0"

__all__ = [
    "BasisKind", "BasisSpec", "GramMatrices", "make_basis",
    "CovDesign", "CovFit", "CovTuningResult", "NewtonOptions", "eval_cov", "exp_map", "family_check",
    "gradient", "hessian", "init_point", "newton_fit", "objective", "precompute_design", "select_cov_tuning",
    "RawCovariances", "Scheme", "SnippetDataset", "Subject", "estimate_delta", "load_csv", "raw_covariances",
    "write_csv", "DataError", "NumericalError",
    "ExperimentConfig", "ExperimentFailure", "ExperimentResult", "MiseResult", "mise_cov", "mise_mean",
    "run_experiment", "EigenSystem", "eigenpairs", "variance_fractions",
    "MeanCVResult", "MeanFit", "cv_select_mean", "eval_mean", "fit_mean",
    "PilotEstimate", "pilot_covariance",
    "CovScenario", "MeanScenario", "SimulationScenario", "noise_variance", "scenario_covariance",
    "scenario_mean", "simulate",
]
