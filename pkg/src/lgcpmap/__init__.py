"""Multivariate log-Gaussian Cox process models for case-control point patterns.

A library and CLI for fitting joint point-process models with a shared
baseline spatial field, disease-specific residual fields and distance-based
exposure effects, using a Laplace-approximation engine over sparse Gaussian
Markov random fields, plus kernel risk-surface estimation and a power-study
simulator.
"""

from .errors import (ConsistencyError, GeometryError, InputError, LgcpError,
                     ModelError, NonConvergenceError, NumericalError)
from .geometry import (Mesh, PointPattern, Window, build_mesh,
                       distance_to_source, fem_matrices, projector,
                       voronoi_weights)
from .inference import (Criteria, FitOptions, FitResult, exceedance, find_mode,
                        fit, log_marginal)
from .latent import (FixedEffect, GmrfTerm, Hyperparameter, matern_cov,
                     pc_prior_calibrate, rw1_term, spde1d_term, spde2d_term)
from .lgcp import (AssembledModel, AugmentedData, ModelSpec, assemble, augment,
                   effect_difference)
from .simulate import Scenario, simulate_study, thin_poisson
from .smoothing import GridField, GridSpec, kernel_intensity, risk_ratio

__version__ = "0.1.0"

__all__ = [
    "Window", "PointPattern", "Mesh", "build_mesh", "fem_matrices", "projector",
    "voronoi_weights", "distance_to_source",
    "GridSpec", "GridField", "kernel_intensity", "risk_ratio",
    "matern_cov", "pc_prior_calibrate", "Hyperparameter", "GmrfTerm",
    "FixedEffect", "spde2d_term", "spde1d_term", "rw1_term",
    "ModelSpec", "AugmentedData", "AssembledModel", "augment", "assemble",
    "effect_difference",
    "FitOptions", "FitResult", "Criteria", "find_mode", "log_marginal", "fit",
    "exceedance",
    "Scenario", "thin_poisson", "simulate_study",
    "LgcpError", "InputError", "GeometryError", "ModelError", "NumericalError",
    "NonConvergenceError", "ConsistencyError",
]
