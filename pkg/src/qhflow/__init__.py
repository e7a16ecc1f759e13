"""Gradient flow on quasi-homogeneous classifiers and max-margin certificates."""

__version__ = "0.1.0"

from .collapse import (
    NCMetrics,
    nc_closed_form,
    nc_metrics,
    nc_suboptimal,
    rescale_to_unit_margin,
    run_nc_flow,
)
from .flow import (
    FlowConfig,
    FlowTrace,
    InitSpec,
    loss,
    loss_gradient,
    margins,
    run_flow,
    smooth_margin,
)
from .geometry import NormalizedPoint, alignment, normalize, psi, seminorm_max_sq, seminorm_sq
from .kkt import KKTReport, SupportInfo, kkt_certificate, solve_max_margin_linear
from .models import (
    ClassificationDataset,
    DimensionError,
    LambdaSpec,
    LinearHomogeneous,
    NormalizedLastLayer,
    ParamVec,
    TwoLayerReluBias,
    UnbalancedDiagonal,
    forward,
    gradient,
    model_from_dict,
    model_to_dict,
    verify_quasi_homogeneity,
)
from .twoballs import (
    BallProblem,
    analytic_solution,
    default_problem,
    radius_sweep,
    robustness,
    sample_balls,
)

__all__ = [
    "BallProblem",
    "ClassificationDataset",
    "DimensionError",
    "FlowConfig",
    "FlowTrace",
    "InitSpec",
    "KKTReport",
    "LambdaSpec",
    "LinearHomogeneous",
    "NCMetrics",
    "NormalizedLastLayer",
    "NormalizedPoint",
    "ParamVec",
    "SupportInfo",
    "TwoLayerReluBias",
    "UnbalancedDiagonal",
    "alignment",
    "analytic_solution",
    "default_problem",
    "forward",
    "gradient",
    "kkt_certificate",
    "loss",
    "loss_gradient",
    "margins",
    "model_from_dict",
    "model_to_dict",
    "nc_closed_form",
    "nc_metrics",
    "nc_suboptimal",
    "normalize",
    "psi",
    "radius_sweep",
    "rescale_to_unit_margin",
    "robustness",
    "run_flow",
    "run_nc_flow",
    "sample_balls",
    "seminorm_max_sq",
    "seminorm_sq",
    "smooth_margin",
    "solve_max_margin_linear",
    "verify_quasi_homogeneity",
]
