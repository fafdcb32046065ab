"""
Maximum likelihood for compactly supported covariance models and their approximations.

Generalized Wendland covariance functions, four families of covariance
approximations (truncation, Bernstein, linear interpolation, vanishing nugget),
perturbed-grid sampling designs, the truncated-modified log-likelihood with
analytic derivatives, box-constrained estimation, simulation, Matern tapering
and Monte Carlo experiment drivers.
"""

from .approximations import ApproxFamily, ApproxInstance, default_family, eval_approx, eval_approx_dtheta, sup_error
from .covariance import SymMatrix, Factorization, apply_pinv, assemble, factorize, spectral_gap_report
from .errors import (
    DomainError,
    FitError,
    NotPositiveDefiniteError,
    NumericError,
    QuadratureError,
    TruncMLError,
)
from .estimation import FitConfig, FitResult, confidence_region, fit
from .grid import GridSpec, SiteSet, generate, min_spacing, neighbor_pairs, packing_bound
from .likelihood import (
    LikelihoodContext,
    LikelihoodEval,
    eval_hessian,
    eval_loglik,
    eval_score,
    fisher_matrix,
    identifiability_gap,
)
from .models import ApproxModel, WendlandModel, make_model
from .simulation import SimSpec, simulate
from .tapering import MaternParams, TaperSpec, fit_tapered, kl_divergence, tapered_kernel
from .wendland import (
    SmoothnessConfig,
    ThetaBox,
    WendlandParams,
    eval_dphi,
    eval_phi,
    phi_base,
    spectral_density,
)

__all__ = [
    "ApproxFamily",
    "ApproxInstance",
    "default_family",
    "eval_approx",
    "eval_approx_dtheta",
    "sup_error",
    "SymMatrix",
    "Factorization",
    "apply_pinv",
    "assemble",
    "factorize",
    "spectral_gap_report",
    "DomainError",
    "FitError",
    "NotPositiveDefiniteError",
    "NumericError",
    "QuadratureError",
    "TruncMLError",
    "FitConfig",
    "FitResult",
    "confidence_region",
    "fit",
    "GridSpec",
    "SiteSet",
    "generate",
    "min_spacing",
    "neighbor_pairs",
    "packing_bound",
    "LikelihoodContext",
    "LikelihoodEval",
    "eval_hessian",
    "eval_loglik",
    "eval_score",
    "fisher_matrix",
    "identifiability_gap",
    "ApproxModel",
    "WendlandModel",
    "make_model",
    "SimSpec",
    "simulate",
    "MaternParams",
    "TaperSpec",
    "fit_tapered",
    "kl_divergence",
    "tapered_kernel",
    "SmoothnessConfig",
    "ThetaBox",
    "WendlandParams",
    "eval_dphi",
    "eval_phi",
    "phi_base",
    "spectral_density",
]

__version__ = "0.1.0"
