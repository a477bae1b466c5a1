"""Latent Gaussian building blocks.

Each latent term packages a sparse-precision builder (a function of its
hyperparameters on log scale), a projector factory mapping data rows onto
latent nodes, and priors:

* 2-D Matern field via the SPDE finite-element construction (alpha = 2,
  so smoothness nu = 1),
* 1-D Matern process on distance knots (alpha = 2, nu = 3/2),
* first-order random walk on distance knots (intrinsic, rank deficiency 1),
* Gaussian fixed effects with mean zero and precision 1000.

Positive hyperparameters are handled internally on log scale; penalized
complexity priors are calibrated from tail-probability statements on the
nominal range and standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.sparse import csr_matrix, diags, identity
from scipy.special import gammaln, kv

from .errors import ModelError
from .geometry import Mesh, fem_matrices, projector as mesh_projector

__all__ = [
    "matern_cov", "kappa_to_range", "range_to_kappa",
    "PcSdPrior", "PcRangePrior", "GammaPrecisionPrior", "pc_prior_calibrate",
    "Hyperparameter", "GmrfTerm", "FixedEffect",
    "spde2d_term", "spde1d_term", "rw1_term",
    "spde_precision", "rw1_structure",
]


# ---------------------------------------------------------------------------
# Matern covariance and SPDE parameter maps
# ---------------------------------------------------------------------------

def matern_cov(d, sigma2: float, kappa: float, nu: float):
    """Matern covariance sigma^2 * 2^(1-nu)/Gamma(nu) * (kappa d)^nu * K_nu(kappa d).

    Returns sigma^2 at d = 0 (the limit). Vectorized over d.
    """
    if sigma2 <= 0 or kappa <= 0 or nu <= 0:
        raise ModelError("matern_cov requires sigma2, kappa, nu > 0")
    d = np.asarray(d, dtype=float)
    scalar = d.ndim == 0
    d = np.atleast_1d(d)
    if (d < 0).any():
        raise ModelError("matern_cov requires d >= 0")
    out = np.full(d.shape, float(sigma2))
    pos = d > 0
    if pos.any():
        kd = kappa * d[pos]
        log_c = (1.0 - nu) * math.log(2.0) - gammaln(nu) + nu * np.log(kd)
        with np.errstate(over="ignore", under="ignore"):
            out[pos] = sigma2 * np.exp(log_c) * kv(nu, kd)
    return float(out[0]) if scalar else out


def kappa_to_range(kappa: float, nu: float) -> float:
    """Nominal correlation range sqrt(8 nu) / kappa."""
    return math.sqrt(8.0 * nu) / kappa


def range_to_kappa(rng: float, nu: float) -> float:
    return math.sqrt(8.0 * nu) / rng


def _tau_for_sd(sigma: float, kappa: float, d: int, alpha: int = 2) -> float:
    """Precision scaling giving marginal variance sigma^2 for the SPDE field.

    sigma^2 = Gamma(nu) / (Gamma(alpha) (4 pi)^(d/2) kappa^(2 nu) tau^2).
    """
    nu = alpha - d / 2.0
    log_s2 = gammaln(nu) - gammaln(alpha) - (d / 2.0) * math.log(4.0 * math.pi)
    return math.exp(0.5 * log_s2) / (sigma * kappa ** nu)


def spde_precision(C, G, kappa: float, tau: float):
    """Sparse SPDE precision tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G), alpha = 2."""
    if kappa <= 0 or tau <= 0:
        raise ModelError("spde_precision requires kappa, tau > 0")
    c_inv = diags(1.0 / C.diagonal(), format="csr")
    M2 = (G @ c_inv @ G).tocsr()
    Q = tau * tau * (kappa ** 4 * C + 2.0 * kappa ** 2 * G + M2)
    return Q.tocsr()


# ---------------------------------------------------------------------------
# Priors on hyperparameters (internal scale is always the log of the value)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcSdPrior:
    """Exponential prior on a standard deviation: P(sigma > u) = alpha."""

    rate: float

    def log_pdf(self, theta: float) -> float:
        sigma = math.exp(theta)
        return math.log(self.rate) - self.rate * sigma + theta

    def log_pdf_natural(self, sigma) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=float)
        return np.log(self.rate) - self.rate * sigma


@dataclass(frozen=True)
class PcRangePrior:
    """Penalized-complexity prior on a correlation range in `dim` dimensions.

    Density is proportional to rho^(-dim/2 - 1) exp(-rate * rho^(-dim/2)),
    i.e. rho^(-dim/2) is exponential with the given rate.
    """

    rate: float
    dim: int

    def log_pdf(self, theta: float) -> float:
        rho = math.exp(theta)
        h = self.dim / 2.0
        return (math.log(h) + math.log(self.rate)
                - h * theta - self.rate * rho ** (-h))

    def log_pdf_natural(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        h = self.dim / 2.0
        return (np.log(h) + np.log(self.rate)
                - (h + 1.0) * np.log(rho) - self.rate * rho ** (-h))

    def cdf(self, rho: float) -> float:
        return math.exp(-self.rate * rho ** (-self.dim / 2.0))


@dataclass(frozen=True)
class GammaPrecisionPrior:
    """Gamma prior on a precision, expressed on the log-precision scale."""

    shape: float
    rate: float

    def log_pdf(self, theta: float) -> float:
        tau = math.exp(theta)
        return (self.shape * math.log(self.rate) - gammaln(self.shape)
                + self.shape * theta - self.rate * tau)


def pc_prior_calibrate(kind: str, threshold: float, prob: float):
    """Calibrate a PC-prior rate from a tail-probability statement.

    kind "sd": P(sigma > threshold) = prob -> exponential rate.
    kind "range2d"/"range1d": P(range < threshold) = prob.
    """
    if threshold <= 0:
        raise ModelError("prior threshold must be positive")
    if not 0.0 < prob < 1.0:
        raise ModelError("tail probability must lie in (0, 1)")
    if kind == "sd":
        return PcSdPrior(rate=-math.log(prob) / threshold)
    if kind in ("range2d", "range1d"):
        dim = 2 if kind == "range2d" else 1
        rate = -math.log(prob) * threshold ** (dim / 2.0)
        return PcRangePrior(rate=rate, dim=dim)
    raise ModelError(f"unknown PC prior kind {kind!r}")


@dataclass(frozen=True)
class Hyperparameter:
    """One positive hyperparameter, optimized on the log scale."""

    name: str
    prior: object
    init: float  # internal (log) scale
    natural_name: str = "value"

    def natural(self, theta: float) -> float:
        return math.exp(theta)


# ---------------------------------------------------------------------------
# Latent terms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GmrfTerm:
    """A latent effect: precision builder, projector factory and priors.

    `kind` distinguishes what the projector consumes: 2-D coordinates for
    spatial fields, scalar distances for the one-dimensional effects.
    """

    name: str
    dim: int
    kind: str  # "spatial2d" | "distance1d" | "rw1"
    hyperparameters: tuple[Hyperparameter, ...]
    rank_def: int
    _precision_fn: Callable[[np.ndarray], csr_matrix]
    _projector_fn: Callable[[np.ndarray], csr_matrix]
    _report_fn: Callable[[np.ndarray], dict]
    knots: Optional[np.ndarray] = None
    sum_to_zero: bool = False

    @property
    def n_hyper(self) -> int:
        return len(self.hyperparameters)

    def precision(self, theta: np.ndarray) -> csr_matrix:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != self.n_hyper:
            raise ModelError(f"term {self.name}: expected {self.n_hyper} hyperparameters, "
                             f"got {theta.size}")
        return self._precision_fn(theta)

    def projector(self, values: np.ndarray) -> csr_matrix:
        return self._projector_fn(values)

    def report(self, theta: np.ndarray) -> dict:
        return self._report_fn(np.asarray(theta, dtype=float).reshape(-1))

    def log_prior(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        return float(sum(h.prior.log_pdf(t) for h, t in zip(self.hyperparameters, theta)))

    def theta_init(self) -> np.ndarray:
        return np.array([h.init for h in self.hyperparameters])


@dataclass(frozen=True)
class FixedEffect:
    """Scalar coefficient with a Gaussian(0, precision) prior."""

    name: str
    column: str
    prior_precision: float = 1000.0

    def __post_init__(self):
        if self.prior_precision <= 0:
            raise ModelError("fixed-effect prior precision must be positive")


def spde2d_term(mesh: Mesh, alpha: int = 2, name: str = "S",
                range_prior: tuple[float, float] = (5.0, 0.95),
                sd_prior: tuple[float, float] = (10.0, 0.01),
                init_range: float = 2.0, init_sd: float = 1.0,
                fem: Optional[tuple] = None) -> GmrfTerm:
    """2-D Matern field on a triangulation, parameterized by (range, sd).

    Internally kappa = sqrt(8)/range and tau is solved from the marginal
    variance identity; the precision stays the sparse SPDE form. Pass a
    precomputed `(C, G)` pair to share finite-element matrices between
    terms on the same mesh.
    """
    if alpha != 2:
        raise ModelError("only alpha = 2 (nu = 1 in 2-D) is supported")
    C, G = fem if fem is not None else fem_matrices(mesh)
    c_inv = diags(1.0 / C.diagonal(), format="csr")
    M2 = (G @ c_inv @ G).tocsr()
    nu = 1.0

    def precision(theta):
        rho, sigma = math.exp(theta[0]), math.exp(theta[1])
        kappa = range_to_kappa(rho, nu)
        tau = _tau_for_sd(sigma, kappa, d=2)
        return (tau * tau * (kappa ** 4 * C + 2.0 * kappa ** 2 * G + M2)).tocsr()

    def report(theta):
        return {"nominal_range": math.exp(theta[0]), "nominal_sd": math.exp(theta[1])}

    hypers = (
        Hyperparameter(f"{name}.range", pc_prior_calibrate("range2d", *range_prior),
                       math.log(init_range), "nominal_range"),
        Hyperparameter(f"{name}.sd", pc_prior_calibrate("sd", *sd_prior),
                       math.log(init_sd), "nominal_sd"),
    )
    return GmrfTerm(name=name, dim=mesh.n_vertices, kind="spatial2d",
                    hyperparameters=hypers, rank_def=0,
                    _precision_fn=precision,
                    _projector_fn=lambda pts: mesh_projector(mesh, pts),
                    _report_fn=report)


def _interval_fem(knots: np.ndarray):
    """Lumped mass and stiffness matrices for P1 elements on an interval."""
    n = knots.size
    h = np.diff(knots)
    c = np.zeros(n)
    c[:-1] += h / 2.0
    c[1:] += h / 2.0
    main = np.zeros(n)
    main[:-1] += 1.0 / h
    main[1:] += 1.0 / h
    off = -1.0 / h
    C = diags(c, format="csr")
    G = diags([off, main, off], offsets=[-1, 0, 1], format="csr")
    return C, G


def interp1d_projector(knots: np.ndarray, x: np.ndarray) -> csr_matrix:
    """Linear interpolation weights onto sorted knots; out-of-range clamps."""
    knots = np.asarray(knots, dtype=float)
    x = np.clip(np.asarray(x, dtype=float).reshape(-1), knots[0], knots[-1])
    idx = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, knots.size - 2)
    t = (x - knots[idx]) / (knots[idx + 1] - knots[idx])
    rows = np.repeat(np.arange(x.size), 2)
    cols = np.column_stack([idx, idx + 1]).ravel()
    vals = np.column_stack([1.0 - t, t]).ravel()
    return csr_matrix((vals, (rows, cols)), shape=(x.size, knots.size))


def spde1d_term(knots: np.ndarray, alpha: int = 2, name: str = "F",
                range_prior: tuple[float, float] = (5.0, 0.95),
                sd_prior: tuple[float, float] = (10.0, 0.01),
                init_range: float = 1.0, init_sd: float = 0.5,
                sum_to_zero: bool = False) -> GmrfTerm:
    """1-D Matern process (nu = 3/2) on strictly increasing distance knots.

    When used as an exposure effect next to an intercept, pass
    `sum_to_zero=True`: a long-range 1-D field is nearly constant over the
    knot span and its level is otherwise confounded with the intercept,
    leaving prior-variance-wide bands on the whole curve.
    """
    if alpha != 2:
        raise ModelError("only alpha = 2 (nu = 3/2 in 1-D) is supported")
    knots = np.asarray(knots, dtype=float).reshape(-1)
    if knots.size < 3 or (np.diff(knots) <= 0).any():
        raise ModelError("spde1d_term needs at least 3 strictly increasing knots")
    C, G = _interval_fem(knots)
    c_inv = diags(1.0 / C.diagonal(), format="csr")
    M2 = (G @ c_inv @ G).tocsr()
    nu = 1.5

    def precision(theta):
        rho, sigma = math.exp(theta[0]), math.exp(theta[1])
        kappa = range_to_kappa(rho, nu)
        tau = _tau_for_sd(sigma, kappa, d=1)
        return (tau * tau * (kappa ** 4 * C + 2.0 * kappa ** 2 * G + M2)).tocsr()

    def report(theta):
        return {"nominal_range": math.exp(theta[0]), "nominal_sd": math.exp(theta[1])}

    hypers = (
        Hyperparameter(f"{name}.range", pc_prior_calibrate("range1d", *range_prior),
                       math.log(init_range), "nominal_range"),
        Hyperparameter(f"{name}.sd", pc_prior_calibrate("sd", *sd_prior),
                       math.log(init_sd), "nominal_sd"),
    )
    return GmrfTerm(name=name, dim=knots.size, kind="distance1d",
                    hyperparameters=hypers, rank_def=0,
                    _precision_fn=precision,
                    _projector_fn=lambda d: interp1d_projector(knots, d),
                    _report_fn=report, knots=knots, sum_to_zero=sum_to_zero)


def rw1_structure(r: int) -> csr_matrix:
    """Second-difference structure matrix of a first-order random walk."""
    if r < 2:
        raise ModelError("a random walk needs at least 2 knots")
    main = np.full(r, 2.0)
    main[0] = main[-1] = 1.0
    off = np.full(r - 1, -1.0)
    return diags([off, main, off], offsets=[-1, 0, 1], format="csr")


def nearest_knot_projector(knots: np.ndarray, x: np.ndarray) -> csr_matrix:
    knots = np.asarray(knots, dtype=float)
    x = np.asarray(x, dtype=float).reshape(-1)
    idx = np.abs(x[:, None] - knots[None, :]).argmin(axis=1)
    return csr_matrix((np.ones(x.size), (np.arange(x.size), idx)),
                      shape=(x.size, knots.size))


def rw1_term(n_knots: int, d_max: float, name: str = "F",
             gamma_prior: tuple[float, float] = (1.0, 5e-5),
             init_log_precision: float = 0.0) -> GmrfTerm:
    """Random walk of order one on equally spaced distance knots.

    The precision is tau * R with R the second-difference structure matrix;
    it has rank deficiency 1 (constant null vector), compensated at
    inference time by a sum-to-zero constraint. Each data row is allocated
    to its nearest knot.
    """
    if n_knots < 2:
        raise ModelError("rw1_term needs at least 2 knots")
    if d_max <= 0:
        raise ModelError("rw1_term needs a positive distance span")
    knots = np.linspace(0.0, d_max, n_knots)
    R = rw1_structure(n_knots)

    def precision(theta):
        return (math.exp(theta[0]) * R).tocsr()

    def report(theta):
        return {"precision": math.exp(theta[0])}

    hypers = (
        Hyperparameter(f"{name}.log_precision", GammaPrecisionPrior(*gamma_prior),
                       init_log_precision, "precision"),
    )
    return GmrfTerm(name=name, dim=n_knots, kind="rw1",
                    hyperparameters=hypers, rank_def=1,
                    _precision_fn=precision,
                    _projector_fn=lambda d: nearest_knot_projector(knots, d),
                    _report_fn=report, knots=knots, sum_to_zero=True)
