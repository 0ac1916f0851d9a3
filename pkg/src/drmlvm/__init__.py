"""Marginal maximum likelihood for binary-response latent variable models.

The q-dimensional latent integral is approximated by a Cut-HDMR dimension
reduction of truncation order ``s``: ``s=0`` is the Laplace approximation,
``s=q`` adaptive Gauss-Hermite quadrature, anything in between a sum of
at most ``s``-dimensional quadratures.
"""

from .quadrature import GaussHermiteRule, EmbeddedPoint, gh_rule, subset_points
from .model import (
    ModelSpec,
    ParameterVector,
    ResponseData,
    linear_predictor,
    log_measurement,
    log_structural,
    covariance_longitudinal,
    simulate_responses,
)
from .inner import SubjectMode, ModeFailure, find_mode, joint_logdensity_with_derivatives
from .approx import (
    ApproxConfig,
    SubjectLogLik,
    hdmr_coefficient,
    eval_count,
    marginal_loglik_subject,
    total_loglik,
)
from .estimate import FitOptions, FitResult, fit, numerical_gradient, sandwich_se

__version__ = "0.1.0"
