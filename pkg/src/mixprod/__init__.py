"""Finite-mixture production-function estimation.

Firms belong to one of J latent technology types; each type has its
own Cobb-Douglas elasticities, labor quality, shock distributions and
AR(1) productivity process. The package simulates such panels, fits
them by three-stage penalized EM, recovers the type-specific objects
constructively from a four-period discretized panel by spectral
methods, and runs the downstream analytics (classification,
productivity-growth bias decomposition, investment regressions, and
input-share dispersion diagnostics).
"""

from .model import (
    TypeParameters,
    MixtureModel,
    InvalidParameterError,
    derived_summaries,
)
from .panel import PanelData, PanelFormatError, PANEL_COLUMNS
from .residuals import (
    flexible_residuals,
    omega_recover,
    eta_recover,
    residual_panel,
)
from .simulate import SimConfig, SimResult, simulate_panel, residual_roundtrip_check
from .likelihood import (
    PenaltyAnchors,
    l1_contribution,
    l2_contribution,
    mixture_loglik,
    penalized_objective,
    penalty_variance,
    penalty_matrix,
    model_to_vector,
    vector_to_model,
    objective_from_vector,
    gradient_complex_step,
    gradient_central_fd,
)
from .estimator import (
    EmSettings,
    EstimationResult,
    e_step,
    fit,
    single_type_closed_form,
    default_anchors,
    standard_errors,
    parameter_names,
    MixtureProductionEstimator,
)
from .spectral import (
    DiscreteMixturePanel,
    RecoveredSystem,
    RecoveryConfig,
    SpectralError,
    SingularityError,
    EigenSeparationError,
    AlignmentError,
    NumericalFailureError,
    joint_from_system,
    sample_joint,
    build_Q,
    eigen_recover,
    align_permutations,
    select_points,
    recover_system,
    check_rank_conditions,
    recover_wage_and_psi,
    match_to_truth,
    discretize_panel,
    empirical_joint,
)
from .analysis import (
    BiasReport,
    InvestmentRegressionResult,
    RankDeficiencyError,
    classify,
    productivity_growth_bias,
    investment_regression,
    quantile_regression,
    share_dispersion,
    residualized_dispersion,
    nearest_rank_percentile,
)

__version__ = "0.1.0"

__all__ = [
    "TypeParameters", "MixtureModel", "InvalidParameterError",
    "derived_summaries",
    "PanelData", "PanelFormatError", "PANEL_COLUMNS",
    "flexible_residuals", "omega_recover", "eta_recover", "residual_panel",
    "SimConfig", "SimResult", "simulate_panel", "residual_roundtrip_check",
    "PenaltyAnchors", "l1_contribution", "l2_contribution",
    "mixture_loglik", "penalized_objective", "penalty_variance",
    "penalty_matrix", "model_to_vector", "vector_to_model",
    "objective_from_vector", "gradient_complex_step", "gradient_central_fd",
    "EmSettings", "EstimationResult", "e_step", "fit",
    "single_type_closed_form", "default_anchors", "standard_errors",
    "parameter_names", "MixtureProductionEstimator",
    "DiscreteMixturePanel", "RecoveredSystem", "RecoveryConfig",
    "SpectralError", "SingularityError", "EigenSeparationError",
    "AlignmentError", "NumericalFailureError",
    "joint_from_system", "sample_joint", "build_Q", "eigen_recover",
    "align_permutations", "select_points", "recover_system",
    "check_rank_conditions", "recover_wage_and_psi", "match_to_truth",
    "discretize_panel", "empirical_joint",
    "BiasReport", "InvestmentRegressionResult", "RankDeficiencyError",
    "classify", "productivity_growth_bias", "investment_regression",
    "quantile_regression", "share_dispersion", "residualized_dispersion",
    "nearest_rank_percentile",
    "__version__",
]
