"""Mesh-free kernel numerics: discrete operators, discrepancy errors,
particle schemes for the Fokker-Planck/Kolmogorov system, kernel
classification, and polar factorization."""

from . import approx, fpk, kernels, learn, operators, polar
from .approx import (descend_discrepancy, descend_fit, discrepancy,
                     error_bound, extrapolate, extrapolate_gradient,
                     interpolate, project_three)
from .kernels import (GaussianKernel, MaternKernel, PeriodicGaussianKernel,
                      ReluKernel, LinearRegressionKernel, combine,
                      compose_transport, erfinv_unit_map, kernel_from_config,
                      kernel_to_config, median_scale)
from .operators import (NodeBasis, divergence_operator, gradient_operator,
                        hessian_operator, inverse_gradient, laplacian_operator,
                        leray_project, project, rkhs_norm)
from .polar import lsap, polar_factorize_map, polar_matrix, sample_like, sample_stats

__version__ = "0.1.0"
