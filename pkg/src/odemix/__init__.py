"""Semiparametric mixed-effects fitting of autonomous dynamical systems.

Fits X'(t) = e^{theta_i} g(X(t)) to sparse noisy longitudinal curves, with a
shared B-spline gradient function g, subject-specific scale effects theta_i,
and per-curve initial conditions, by penalized hierarchical least squares.
"""

__version__ = "0.1.0"

from .basis import PenaltyMatrix, SplineBasis, build_flatness_penalty, eval_basis
from .data import (
    Curve,
    Dataset,
    ParameterState,
    PenaltySettings,
    Subject,
    load_dataset,
    save_dataset,
    validate_for_variance,
)
from .dynamics import (
    CurveSolution,
    GradientFunction,
    eval_at_times,
    sensitivities_closed_form,
    sensitivities_variational,
    solve_trajectory,
)
from .inference import InfoMatrices, info_matrices, se_g
from .objective import LossBreakdown, VarianceEstimates, loss, residuals, update_variances
from .optimizer import (
    FitOptions,
    FitResult,
    JacobianBlocks,
    assemble_jacobians,
    fit,
    lm_step_a,
    lm_step_beta,
    lm_step_theta,
    newton_polish,
)
from .selection import (
    CVReport,
    ModelCandidate,
    approx_cv,
    exact_cv,
    select_model,
    stepwise_knot_candidates,
)
from .simulate import SimDesign, default_design, default_estimation_basis, generate
from .twostage import (
    TwoStageOptions,
    presmooth_curve,
    region_ise,
    stage2_fit,
    two_stage_estimate,
)

__all__ = [
    "__version__",
    "SplineBasis",
    "PenaltyMatrix",
    "build_flatness_penalty",
    "eval_basis",
    "Dataset",
    "Subject",
    "Curve",
    "ParameterState",
    "PenaltySettings",
    "load_dataset",
    "save_dataset",
    "validate_for_variance",
    "GradientFunction",
    "CurveSolution",
    "solve_trajectory",
    "eval_at_times",
    "sensitivities_closed_form",
    "sensitivities_variational",
    "loss",
    "residuals",
    "update_variances",
    "LossBreakdown",
    "VarianceEstimates",
    "FitOptions",
    "FitResult",
    "JacobianBlocks",
    "assemble_jacobians",
    "fit",
    "newton_polish",
    "lm_step_beta",
    "lm_step_theta",
    "lm_step_a",
    "InfoMatrices",
    "info_matrices",
    "se_g",
    "CVReport",
    "ModelCandidate",
    "approx_cv",
    "exact_cv",
    "select_model",
    "stepwise_knot_candidates",
    "SimDesign",
    "default_design",
    "default_estimation_basis",
    "generate",
    "TwoStageOptions",
    "presmooth_curve",
    "stage2_fit",
    "two_stage_estimate",
    "region_ise",
]
