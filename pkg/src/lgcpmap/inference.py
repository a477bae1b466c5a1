"""Laplace-approximation engine for the latent Gaussian point-process models.

The inner step finds the latent posterior mode by damped Newton iterations
(the Poisson pseudo-likelihood is log-concave, so the mode is unique) and
builds a Gaussian approximation there. The hyperparameter posterior is
explored around its mode: optimized on the log scale with quasi-Newton
and finite-difference gradients, then evaluated on a centered design whose
normalized weights mix the conditional Gaussians into latent marginals.
Sum-to-zero constraints on intrinsic blocks are enforced by conditioning
by kriging after each solve, which preserves sparsity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from itertools import product
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.sparse import csr_matrix, diags
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import splu
from scipy.stats import norm

from .errors import ModelError, NonConvergenceError, NumericalError
from .lgcp import AssembledModel, BlockInfo, PoissonPseudoLikelihood
from .smoothing import GridField, GridSpec
from .geometry import Window

_THETA_BOX = (-7.0, 7.0)  # internal log-scale search box for hyperparameters

__all__ = [
    "ModeResult", "FitOptions", "FitResult", "Criteria",
    "find_mode", "log_marginal", "fit", "criteria_from_fit", "exceedance",
    "posterior_gradient",
]


# ---------------------------------------------------------------------------
# Sparse SPD factorization with a reusable fill-reducing permutation
# ---------------------------------------------------------------------------

class _SpdFactor:
    """LU factorization of a symmetric positive definite sparse matrix.

    The fill-reducing (reverse Cuthill-McKee) permutation is supplied by
    the cache below so it is computed once per sparsity pattern and reused
    across hyperparameter values.
    """

    def __init__(self, Q: csr_matrix, perm: np.ndarray):
        self.perm = perm
        self.inv_perm = np.argsort(perm)
        Qp = Q[perm][:, perm].tocsc()
        try:
            self.lu = splu(Qp, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                           options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise NumericalError(f"sparse factorization failed: {exc}") from exc
        d = self.lu.U.diagonal()
        if not np.isfinite(d).all() or (d <= 0).any():
            raise NumericalError("indefinite precision matrix: factorization has "
                                 "nonpositive pivots")
        self.logdet = float(np.log(d).sum())

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            return self.lu.solve(b[self.perm])[self.inv_perm]
        return self.lu.solve(b[self.perm, :])[self.inv_perm, :]


class _FactorCache:
    """Remembers one RCM ordering per sparsity pattern."""

    def __init__(self):
        self._perms: dict[bytes, np.ndarray] = {}

    def factor(self, Q: csr_matrix) -> _SpdFactor:
        Q = Q.tocsr()
        key = Q.indptr.tobytes() + Q.indices.tobytes()
        perm = self._perms.get(key)
        if perm is None:
            perm = np.asarray(reverse_cuthill_mckee(Q, symmetric_mode=True))
            if len(self._perms) > 32:
                self._perms.clear()
            self._perms[key] = perm
        return _SpdFactor(Q, perm)


_default_cache = _FactorCache()


# ---------------------------------------------------------------------------
# Inner problem: latent posterior mode and Gaussian approximation
# ---------------------------------------------------------------------------

@dataclass
class ModeResult:
    x: np.ndarray
    eta: np.ndarray
    Q_star: csr_matrix
    factor: _SpdFactor
    curvature: np.ndarray
    loglik: float
    n_iter: int
    grad_norms: list[float]
    theta: np.ndarray


def _project_onto_constraints(x: np.ndarray, A: Optional[np.ndarray]) -> np.ndarray:
    if A is None:
        return x
    lam = np.linalg.solve(A @ A.T, A @ x)
    return x - A.T @ lam


def _projected_grad_norm(g: np.ndarray, A: Optional[np.ndarray]) -> float:
    if A is None:
        return float(np.abs(g).max())
    lam = np.linalg.solve(A @ A.T, A @ g)
    return float(np.abs(g - A.T @ lam).max())


def find_mode(model: AssembledModel, theta: np.ndarray,
              x0: Optional[np.ndarray] = None, tol: float = 1e-6,
              max_iter: int = 50, cache: Optional[_FactorCache] = None) -> ModeResult:
    """Newton iterations on the latent log-posterior at fixed hyperparameters.

    Stops when the (constraint-projected) gradient infinity-norm drops
    below `tol`; raises NonConvergenceError with the iteration trace after
    `max_iter` iterations. Steps are damped by halving until the objective
    improves, which is enough here because the objective is concave.
    """
    cache = cache or _default_cache
    theta = np.asarray(theta, dtype=float).reshape(-1)
    Q_p = model.prior_precision(theta)
    A_c = model.constraints()
    lik = model.likelihood
    y, w, Z = model.data.y, model.data.weight, model.Z

    x = np.zeros(model.n_latent) if x0 is None else _project_onto_constraints(
        np.asarray(x0, dtype=float).copy(), A_c)

    def objective(xv, eta):
        return lik.loglik(eta, y, w) - 0.5 * float(xv @ (Q_p @ xv))

    eta = Z @ x
    f_cur = objective(x, eta)
    if not np.isfinite(f_cur):
        x = np.zeros(model.n_latent)
        eta = Z @ x
        f_cur = objective(x, eta)
    grad_norms: list[float] = []
    Q_star = None
    factor = None
    curv = None
    for it in range(max_iter + 1):
        g = Z.T @ lik.grad(eta, y, w) - Q_p @ x
        gnorm = _projected_grad_norm(g, A_c)
        grad_norms.append(gnorm)
        curv = lik.curvature(eta, y, w)
        Q_star = (Q_p + (Z.T @ diags(curv) @ Z)).tocsr()
        factor = cache.factor(Q_star)
        if gnorm < tol:
            return ModeResult(x=x, eta=eta, Q_star=Q_star, factor=factor,
                              curvature=curv, loglik=lik.loglik(eta, y, w),
                              n_iter=it, grad_norms=grad_norms, theta=theta)
        if it == max_iter:
            break
        delta = factor.solve(g)
        if A_c is not None:
            B = factor.solve(A_c.T)
            S = A_c @ B
            viol = A_c @ (x + delta)
            delta = delta - B @ np.linalg.solve(S, viol)
        alpha = 1.0
        improved = False
        for _ in range(40):
            x_new = x + alpha * delta
            eta_new = Z @ x_new
            f_new = objective(x_new, eta_new)
            if np.isfinite(f_new) and f_new >= f_cur - 1e-12 * (1.0 + abs(f_cur)):
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        x, eta, f_cur = x_new, eta_new, f_new
    raise NonConvergenceError(
        f"inner Newton failed to reach tol={tol} in {max_iter} iterations "
        f"(last projected gradient norm {grad_norms[-1]:.3e})",
        trace=grad_norms)


def inner_gradient(model: AssembledModel, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Analytic gradient of the inner objective log p(y|x) + log p(x|theta)."""
    Q_p = model.prior_precision(np.asarray(theta, dtype=float).reshape(-1))
    eta = model.Z @ x
    return model.Z.T @ model.likelihood.grad(eta, model.data.y, model.data.weight) - Q_p @ x


def inner_objective(model: AssembledModel, theta: np.ndarray, x: np.ndarray) -> float:
    Q_p = model.prior_precision(np.asarray(theta, dtype=float).reshape(-1))
    eta = model.Z @ x
    return model.likelihood.loglik(eta, model.data.y, model.data.weight) \
        - 0.5 * float(x @ (Q_p @ x))


def log_marginal(model: AssembledModel, theta: np.ndarray,
                 mode: Optional[ModeResult] = None,
                 cache: Optional[_FactorCache] = None) -> float:
    """Laplace approximation to log p(y | theta).

    Evaluates log p(y|x*) + log p(x*|theta) - log q(x*|y,theta) with sparse
    factorizations; constrained blocks contribute the standard correction
    log det(A Q^-1 A') for both the prior and the Gaussian approximation.
    Deterministic given its inputs.
    """
    cache = cache or _default_cache
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if mode is None or not np.array_equal(mode.theta, theta):
        mode = find_mode(model, theta, cache=cache)
    Q_p = model.prior_precision(theta)
    jitter = model.rank_def_jitter(Q_p)
    Q_pj = (Q_p + jitter).tocsr() if jitter is not None else Q_p
    factor_p = cache.factor(Q_pj)
    quad = float(mode.x @ (Q_pj @ mode.x))
    lm = mode.loglik - 0.5 * quad + 0.5 * factor_p.logdet - 0.5 * mode.factor.logdet
    A_c = model.constraints()
    if A_c is not None:
        Bp = factor_p.solve(A_c.T)
        sign_p, ld_p = np.linalg.slogdet(A_c @ Bp)
        Bs = mode.factor.solve(A_c.T)
        sign_s, ld_s = np.linalg.slogdet(A_c @ Bs)
        if sign_p <= 0 or sign_s <= 0:
            raise NumericalError("constraint covariance is not positive definite")
        lm += 0.5 * ld_p - 0.5 * ld_s
    return float(lm)


def posterior_gradient(model: AssembledModel, theta: np.ndarray, step: float = 1e-3,
                       cache: Optional[_FactorCache] = None) -> np.ndarray:
    """Central-difference gradient of log p(y|theta) + log p(theta)."""
    cache = cache or _default_cache
    theta = np.asarray(theta, dtype=float).reshape(-1)
    g = np.zeros(theta.size)
    for i in range(theta.size):
        tp = theta.copy(); tp[i] += step
        tm = theta.copy(); tm[i] -= step
        fp = log_marginal(model, tp, cache=cache) + model.log_prior_theta(tp)
        fm = log_marginal(model, tm, cache=cache) + model.log_prior_theta(tm)
        g[i] = (fp - fm) / (2.0 * step)
    return g


# ---------------------------------------------------------------------------
# Full fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitOptions:
    """Knobs for the hyperparameter exploration and prediction grids."""

    grid: Optional[GridSpec] = None
    window: Optional[Window] = None
    exploration: str = "auto"      # auto | grid | ccd | eb
    z_step: float = 1.0            # design spacing in posterior-sd units
    fd_step: float = 1e-3
    optimizer_max_iter: int = 100
    inner_tol: float = 1e-6
    inner_max_iter: int = 50
    dense_limit: int = 4000
    gh_nodes: int = 21
    compute_criteria: bool = True
    eigen_floor: float = 0.25      # smallest allowed curvature of log posterior

    def __post_init__(self):
        if self.exploration not in ("auto", "grid", "ccd", "eb"):
            raise ModelError(f"unknown exploration strategy {self.exploration!r}")


@dataclass(frozen=True)
class Criteria:
    dic: float
    p_d: float
    mean_deviance: float
    waic: float
    p_waic: float
    lppd: float
    log_marginal_likelihood: float
    dic_unreliable: bool = False
    waic_unreliable: bool = False
    n_negative_pwaic: int = 0

    def to_dict(self) -> dict:
        return {
            "dic": self.dic, "p_d": self.p_d, "mean_deviance": self.mean_deviance,
            "waic": self.waic, "p_waic": self.p_waic, "lppd": self.lppd,
            "log_marginal_likelihood": self.log_marginal_likelihood,
            "dic_unreliable": self.dic_unreliable,
            "waic_unreliable": self.waic_unreliable,
            "n_negative_pwaic": self.n_negative_pwaic,
        }


@dataclass(frozen=True)
class FieldPerTheta:
    """Gaussian summaries of one latent field at masked grid cells,
    one row per explored hyperparameter point."""

    mean: np.ndarray  # (G, cells)
    var: np.ndarray   # (G, cells)


@dataclass(frozen=True)
class ExposureCurve:
    name: str
    disease: int
    kind: str
    knots: Optional[np.ndarray]   # None for the fixed-slope form
    mean: np.ndarray              # (G, r)
    var: np.ndarray               # (G, r)


@dataclass
class FitResult:
    """Posterior summaries, explored hyperparameter grid and criteria."""

    model_id: int
    n_diseases: int
    exposure: Optional[str]
    theta_names: tuple[str, ...]
    theta_mode: np.ndarray
    theta_sd: np.ndarray
    theta_cov: np.ndarray
    hyper_report: list
    grid_thetas: np.ndarray       # (G, d)
    grid_weights: np.ndarray      # (G,)
    grid_logpost: np.ndarray      # (G,)
    latent_mean: np.ndarray
    latent_sd: np.ndarray
    per_theta_latent_mean: np.ndarray   # (G, m)
    per_theta_latent_var: np.ndarray    # (G, m)
    blocks: tuple[BlockInfo, ...]
    row_eta_mean: np.ndarray
    per_theta_row_mean: np.ndarray      # (G, n)
    per_theta_row_var: np.ndarray       # (G, n)
    criteria: Optional[Criteria]
    convergence: dict
    grid: Optional[GridSpec] = None
    field_mask: Optional[np.ndarray] = None      # (ny, nx) bool
    field_cells: Optional[np.ndarray] = None     # flat indices of masked cells
    fields: dict = dataclass_field(default_factory=dict)        # name -> FieldPerTheta
    field_cross: dict = dataclass_field(default_factory=dict)   # (u, v) -> (G, cells)
    exposure_curves: dict = dataclass_field(default_factory=dict)

    def block(self, name: str) -> BlockInfo:
        for b in self.blocks:
            if b.name == name:
                return b
        raise ModelError(f"no latent block named {name!r}")

    def mixture_mean_sd(self, means: np.ndarray, variances: np.ndarray):
        """Collapse per-theta Gaussian components into moment summaries."""
        w = self.grid_weights.reshape(-1, *([1] * (means.ndim - 1)))
        mean = (w * means).sum(axis=0)
        second = (w * (variances + means ** 2)).sum(axis=0)
        return mean, np.sqrt(np.maximum(second - mean ** 2, 0.0))

    def mixture_quantile(self, means: np.ndarray, sds: np.ndarray, q: float) -> float:
        """Quantile of a scalar Gaussian mixture by bisection."""
        w = self.grid_weights
        lo = float((means - 8.0 * sds).min())
        hi = float((means + 8.0 * sds).max())
        if hi <= lo:
            return lo
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            p = float((w * norm.cdf((mid - means) / np.maximum(sds, 1e-300))).sum())
            if p < q:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-10 * (1.0 + abs(mid)):
                break
        return 0.5 * (lo + hi)

    def fixed_effect_table(self) -> list[dict]:
        """Mean, sd and central 95% interval of every scalar fixed effect."""
        out = []
        for b in self.blocks:
            if b.kind != "fixed":
                continue
            m = self.per_theta_latent_mean[:, b.start]
            s = np.sqrt(self.per_theta_latent_var[:, b.start])
            mean, sd = self.mixture_mean_sd(m, s ** 2)
            out.append({
                "name": b.name, "disease": b.disease,
                "mean": float(mean), "sd": float(sd),
                "ci_low": self.mixture_quantile(m, s, 0.025),
                "ci_high": self.mixture_quantile(m, s, 0.975),
            })
        return out

    def exposure_curve_summary(self, name: str) -> dict:
        """Pointwise mixture mean, sd and 95% band of one exposure effect."""
        curve = self.exposure_curves.get(name)
        if curve is None:
            raise ModelError(f"fit has no exposure term named {name!r}")
        mean, sd = self.mixture_mean_sd(curve.mean, curve.var)
        r = curve.mean.shape[1]
        lo = np.array([self.mixture_quantile(curve.mean[:, k],
                                             np.sqrt(curve.var[:, k]), 0.025)
                       for k in range(r)])
        hi = np.array([self.mixture_quantile(curve.mean[:, k],
                                             np.sqrt(curve.var[:, k]), 0.975)
                       for k in range(r)])
        return {"name": name, "kind": curve.kind, "disease": curve.disease,
                "knots": curve.knots, "mean": mean, "sd": sd,
                "ci_low": lo, "ci_high": hi}

    def field_grid(self, name: str, statistic: str = "mean") -> GridField:
        """Materialize a posterior field summary as a GridField."""
        if self.grid is None or name not in self.fields:
            raise ModelError(f"fit has no gridded field {name!r}")
        f = self.fields[name]
        mean, sd = self.mixture_mean_sd(f.mean, f.var)
        flat = np.full(self.grid.ny * self.grid.nx, np.nan)
        flat[self.field_cells] = mean if statistic == "mean" else sd
        return GridField(self.grid, flat.reshape(self.grid.ny, self.grid.nx),
                         self.field_mask)

    def to_report_dict(self) -> dict:
        rep = {
            "model": self.model_id,
            "n_diseases": self.n_diseases,
            "exposure": self.exposure,
            "hyperparameters": self.hyper_report,
            "theta_mode": self.theta_mode.tolist(),
            "theta_sd": self.theta_sd.tolist(),
            "theta_names": list(self.theta_names),
            "grid_weights": self.grid_weights.tolist(),
            "criteria": self.criteria.to_dict() if self.criteria else None,
            "fixed_effects": self.fixed_effect_table(),
            "convergence": self.convergence,
        }
        return rep


def _exploration_design(d: int, strategy: str, z_step: float) -> np.ndarray:
    if d == 0:
        return np.zeros((1, 0))
    if strategy == "auto":
        strategy = "grid" if d <= 3 else "ccd"
    if strategy == "eb":
        return np.zeros((1, d))
    if strategy == "grid":
        pts = np.arange(-2, 3) * z_step if d <= 2 else np.arange(-1, 2) * z_step
        return np.array(list(product(pts, repeat=d)), dtype=float)
    # ccd: center plus axial points
    rows = [np.zeros(d)]
    r = z_step * math.sqrt(d)
    for i in range(d):
        for s in (-1.0, 1.0):
            z = np.zeros(d)
            z[i] = s * r
            rows.append(z)
    return np.vstack(rows)


def _fd_hessian(fun: Callable[[np.ndarray], float], x0: np.ndarray, step: float,
                f0: Optional[float] = None) -> np.ndarray:
    d = x0.size
    H = np.zeros((d, d))
    f0 = fun(x0) if f0 is None else f0
    fp = np.zeros(d)
    fm = np.zeros(d)
    for i in range(d):
        xp = x0.copy(); xp[i] += step
        xm = x0.copy(); xm[i] -= step
        fp[i] = fun(xp)
        fm[i] = fun(xm)
        H[i, i] = (fp[i] + fm[i] - 2.0 * f0) / step ** 2
    for i in range(d):
        for j in range(i + 1, d):
            xpp = x0.copy(); xpp[[i, j]] += step
            xmm = x0.copy(); xmm[[i, j]] -= step
            fij = (fun(xpp) + fun(xmm) + 2.0 * f0
                   - fp[i] - fm[i] - fp[j] - fm[j]) / (2.0 * step ** 2)
            H[i, j] = H[j, i] = fij
    return H


def _row_variances(Z: csr_matrix, Sigma: np.ndarray, chunk: int = 2000) -> np.ndarray:
    """diag(Z Sigma Z') computed in row chunks to bound memory."""
    n = Z.shape[0]
    out = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        Zc = Z[lo:hi]
        T = Zc @ Sigma
        out[lo:hi] = np.asarray(Zc.multiply(T).sum(axis=1)).ravel()
    return out


def _proj_variances(A: csr_matrix, Sigma_block: np.ndarray) -> np.ndarray:
    T = A @ Sigma_block
    return np.asarray(A.multiply(T).sum(axis=1)).ravel()


def _proj_cross(A: csr_matrix, Sigma_uv: np.ndarray) -> np.ndarray:
    T = A @ Sigma_uv
    return np.asarray(A.multiply(T).sum(axis=1)).ravel()


def fit(model: AssembledModel, options: Optional[FitOptions] = None) -> FitResult:
    """Full approximate posterior: hyperparameter mode, exploration design,
    mixed latent marginals, gridded field summaries and model criteria."""
    options = options or FitOptions()
    cache = _FactorCache()
    d = model.n_theta
    if model.n_latent > options.dense_limit:
        raise NumericalError(
            f"latent dimension {model.n_latent} exceeds dense posterior limit "
            f"{options.dense_limit}; coarsen the mesh or raise dense_limit")

    lm_cache: dict[bytes, float] = {}
    mode_cache: dict[bytes, ModeResult] = {}
    warm: dict[str, Optional[np.ndarray]] = {"x": None}
    n_eval = [0]

    def posterior(theta: np.ndarray) -> float:
        key = np.asarray(theta, dtype=float).tobytes()
        if key in lm_cache:
            return lm_cache[key]
        mode = find_mode(model, theta, x0=warm["x"], tol=options.inner_tol,
                         max_iter=options.inner_max_iter, cache=cache)
        warm["x"] = mode.x
        mode_cache[key] = mode
        val = log_marginal(model, theta, mode=mode, cache=cache) \
            + model.log_prior_theta(theta)
        lm_cache[key] = val
        n_eval[0] += 1
        return val

    theta0 = model.theta_init()
    opt_info = {"n_inner_failures": 0}
    if d > 0:
        def neg(theta):
            try:
                return -posterior(theta)
            except (NonConvergenceError, NumericalError):
                opt_info["n_inner_failures"] += 1
                return 1e12

        def neg_grad(theta):
            h = options.fd_step
            g = np.zeros(d)
            for i in range(d):
                tp = theta.copy(); tp[i] += h
                tm = theta.copy(); tm[i] -= h
                g[i] = (neg(tp) - neg(tm)) / (2.0 * h)
            return g

        res = minimize(neg, theta0, jac=neg_grad, method="L-BFGS-B",
                       bounds=[(_THETA_BOX[0], _THETA_BOX[1])] * d,
                       options={"maxiter": options.optimizer_max_iter,
                                "ftol": 1e-10, "gtol": 1e-5})
        theta_star = res.x
        final_grad = float(np.abs(res.jac).max()) if res.jac is not None else float("nan")
        if not res.success and final_grad > 1e-2:
            raise NonConvergenceError(
                f"hyperparameter optimization did not converge: {res.message} "
                f"(|grad| = {final_grad:.3e})",
                trace=[res.message])
        f_star = posterior(theta_star)
        H = _fd_hessian(lambda t: -posterior(t), theta_star,
                        step=max(options.fd_step * 10, 1e-2), f0=-f_star)
        H = 0.5 * (H + H.T)
        eigval, eigvec = np.linalg.eigh(H)
        floored = bool((eigval < options.eigen_floor).any())
        eigval = np.maximum(eigval, options.eigen_floor)
        H_reg = eigvec @ np.diag(eigval) @ eigvec.T
        theta_cov = eigvec @ np.diag(1.0 / eigval) @ eigvec.T
        theta_sd = np.sqrt(np.diag(theta_cov))
        scale = eigvec @ np.diag(1.0 / np.sqrt(eigval))
        design = _exploration_design(d, options.exploration, options.z_step)
        thetas = np.clip(theta_star[None, :] + design @ scale.T,
                 _THETA_BOX[0], _THETA_BOX[1])
        logpost = np.array([posterior(t) for t in thetas])
        # Laplace over theta for the marginal likelihood
        sign, ld_H = np.linalg.slogdet(H_reg)
        log_ml = f_star + 0.5 * d * math.log(2.0 * math.pi) - 0.5 * ld_H
        n_outer = int(res.nit)
    else:
        theta_star = theta0
        f_star = posterior(theta_star)
        thetas = np.zeros((1, 0))
        logpost = np.array([f_star])
        theta_cov = np.zeros((0, 0))
        theta_sd = np.zeros(0)
        log_ml = f_star
        floored = False
        final_grad = 0.0
        n_outer = 0

    wts = np.exp(logpost - logpost.max())
    wts /= wts.sum()
    keep = wts > 1e-12
    thetas, logpost, wts = thetas[keep], logpost[keep], wts[keep]
    wts /= wts.sum()

    # Per-design-point Gaussian summaries
    A_c = model.constraints()
    G_pts = thetas.shape[0]
    m = model.n_latent
    n = model.n_rows
    lat_mean = np.zeros((G_pts, m))
    lat_var = np.zeros((G_pts, m))
    row_mean = np.zeros((G_pts, n))
    row_var = np.zeros((G_pts, n))

    spatial_blocks = [b for b in model.blocks if b.kind == "spatial2d"]
    want_fields = options.grid is not None and spatial_blocks
    A_grid = None
    field_cells = None
    field_mask = None
    if want_fields:
        if options.window is None:
            raise ModelError("field prediction needs both a grid and a window")
        field_mask = options.grid.window_mask(options.window)
        centers = options.grid.centers()
        field_cells = np.flatnonzero(field_mask.ravel())
        from .geometry import projector as mesh_projector
        A_grid = mesh_projector(model.mesh, centers[field_cells])
    fields = {b.name: [] for b in spatial_blocks} if want_fields else {}
    disease_fields = [b for b in spatial_blocks if b.disease is not None]
    pairs = [(u.disease, v.disease) for i, u in enumerate(disease_fields)
             for v in disease_fields[i + 1:]] if want_fields else []
    cross_acc = {p: [] for p in pairs}
    exposure_blocks = [b for b in model.blocks
                       if b.kind in ("rw1", "distance1d")
                       or (b.kind == "fixed" and b.name.startswith("F"))]
    curves_acc = {b.name: [] for b in exposure_blocks}
    inner_iters = []

    for gidx, th in enumerate(thetas):
        key = th.tobytes()
        mode = mode_cache.get(key)
        if mode is None:
            mode = find_mode(model, th, x0=warm["x"], tol=options.inner_tol,
                             max_iter=options.inner_max_iter, cache=cache)
        inner_iters.append(mode.n_iter)
        Sigma = np.linalg.inv(mode.Q_star.toarray())
        if A_c is not None:
            B = Sigma @ A_c.T
            S = A_c @ B
            Sigma = Sigma - B @ np.linalg.solve(S, B.T)
        lat_mean[gidx] = mode.x
        lat_var[gidx] = np.maximum(np.diag(Sigma), 0.0)
        row_mean[gidx] = mode.eta
        row_var[gidx] = np.maximum(_row_variances(model.Z, Sigma), 0.0)
        if want_fields:
            for b in spatial_blocks:
                mu = A_grid @ mode.x[b.slice]
                var = np.maximum(_proj_variances(A_grid, Sigma[b.slice, b.slice]), 0.0)
                fields[b.name].append((mu, var))
            for (u, v) in pairs:
                bu = model.block(f"S{u}")
                bv = model.block(f"S{v}")
                cross_acc[(u, v)].append(
                    _proj_cross(A_grid, Sigma[bu.slice, bv.slice]))
        for b in exposure_blocks:
            curves_acc[b.name].append((mode.x[b.slice].copy(),
                                       np.maximum(np.diag(Sigma[b.slice, b.slice]), 0.0)))

    field_summaries = {}
    for name, vals in fields.items():
        field_summaries[name] = FieldPerTheta(
            mean=np.vstack([v[0] for v in vals]),
            var=np.vstack([v[1] for v in vals]))
    cross_summaries = {p: np.vstack(v) for p, v in cross_acc.items()}
    curve_summaries = {}
    for b in exposure_blocks:
        vals = curves_acc[b.name]
        curve_summaries[b.name] = ExposureCurve(
            name=b.name, disease=b.disease if b.disease is not None else 0,
            kind=b.kind, knots=None if b.term is None else b.term.knots,
            mean=np.vstack([v[0] for v in vals]),
            var=np.vstack([v[1] for v in vals]))

    w_col = wts[:, None]
    latent_mean = (w_col * lat_mean).sum(axis=0)
    second = (w_col * (lat_var + lat_mean ** 2)).sum(axis=0)
    latent_sd = np.sqrt(np.maximum(second - latent_mean ** 2, 0.0))
    row_eta_mean = (w_col * row_mean).sum(axis=0)

    crit = None
    if options.compute_criteria and isinstance(model.likelihood, PoissonPseudoLikelihood):
        crit = compute_criteria(wts, row_mean, row_var, model.data.y,
                                model.data.weight, log_ml, options.gh_nodes)

    convergence = {
        "theta_optimizer_iterations": n_outer,
        "n_posterior_evaluations": n_eval[0],
        "final_outer_grad_norm": final_grad,
        "hessian_floored": floored,
        "inner_newton_iterations": inner_iters,
        "n_inner_failures": opt_info.get("n_inner_failures", 0) if d > 0 else 0,
        "n_design_points": int(G_pts),
    }

    result = FitResult(
        model_id=model.spec.model,
        n_diseases=model.n_diseases,
        exposure=model.spec.exposure,
        theta_names=model.theta_names,
        theta_mode=theta_star,
        theta_sd=theta_sd,
        theta_cov=theta_cov,
        hyper_report=model.hyper_report(theta_star, theta_sd if d else None),
        grid_thetas=thetas,
        grid_weights=wts,
        grid_logpost=logpost,
        latent_mean=latent_mean,
        latent_sd=latent_sd,
        per_theta_latent_mean=lat_mean,
        per_theta_latent_var=lat_var,
        blocks=model.blocks,
        row_eta_mean=row_eta_mean,
        per_theta_row_mean=row_mean,
        per_theta_row_var=row_var,
        criteria=crit,
        convergence=convergence,
        grid=options.grid,
        field_mask=field_mask,
        field_cells=field_cells,
        fields=field_summaries,
        field_cross=cross_summaries,
        exposure_curves=curve_summaries,
    )
    return result


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------

def compute_criteria(weights: np.ndarray, row_mean: np.ndarray, row_var: np.ndarray,
                     y: np.ndarray, w: np.ndarray, log_ml: float,
                     gh_nodes: int = 21) -> Criteria:
    """DIC and WAIC from per-design-point Gaussian predictor summaries.

    DIC uses the deviance at the posterior-mean predictor for its effective
    number of parameters; WAIC uses the variance-based p_WAIC. The pointwise
    predictive density for dummy rows (an expectation of exp(-w e^eta)) has
    no closed form and is integrated with Gauss-Hermite quadrature.
    """
    weights = np.asarray(weights, dtype=float)
    G, n = row_mean.shape
    obs = y > 0.5

    # E_j[ll_k] and E_j[ll_k^2] in closed form
    with np.errstate(over="ignore"):
        e_exp = np.exp(row_mean + 0.5 * row_var)           # E[e^eta]
        e_exp2 = np.exp(2.0 * row_mean + 2.0 * row_var)    # E[e^2eta]
    Ell = y[None, :] * row_mean - w[None, :] * e_exp
    Ell2 = (y[None, :] ** 2 * (row_var + row_mean ** 2)
            - 2.0 * y[None, :] * w[None, :] * (row_mean + row_var) * e_exp
            + w[None, :] ** 2 * e_exp2)

    mean_dev = -2.0 * float((weights[:, None] * Ell).sum())
    eta_bar = (weights[:, None] * row_mean).sum(axis=0)
    with np.errstate(over="ignore"):
        d_hat = -2.0 * float(np.sum(y * eta_bar - w * np.exp(eta_bar)))
    p_d = mean_dev - d_hat
    dic = mean_dev + p_d

    # lppd: log E[exp(ll)] mixing over design points
    Epred = np.empty((G, n))
    Epred[:, obs] = e_exp[:, obs]  # y=1, w=0 rows: E[e^eta]
    dummy = ~obs
    if dummy.any():
        t, gw = np.polynomial.hermite_e.hermegauss(gh_nodes)
        gw = gw / gw.sum()
        md = row_mean[:, dummy]
        sd = np.sqrt(row_var[:, dummy])
        acc = np.zeros_like(md)
        for tk, gk in zip(t, gw):
            with np.errstate(over="ignore"):
                acc += gk * np.exp(-w[None, dummy] * np.exp(md + sd * tk))
        Epred[:, dummy] = acc
    mix = (weights[:, None] * Epred).sum(axis=0)
    lppd_k = np.log(np.maximum(mix, 1e-300))
    lppd = float(lppd_k.sum())

    with np.errstate(over="ignore", invalid="ignore"):
        E_mix = (weights[:, None] * Ell).sum(axis=0)
        E2_mix = (weights[:, None] * Ell2).sum(axis=0)
        p_waic_k = E2_mix - E_mix ** 2
    n_neg = int((p_waic_k < -1e-12).sum())
    p_waic = float(np.maximum(p_waic_k, 0.0).sum())
    waic = -2.0 * (lppd - p_waic)

    bad_share = n_neg / max(n, 1)
    unreliable = bad_share > 0.05 or not np.isfinite(waic) or not np.isfinite(lppd)
    dic_unreliable = not np.isfinite(dic)
    return Criteria(dic=dic, p_d=p_d, mean_deviance=mean_dev, waic=waic,
                    p_waic=p_waic, lppd=lppd, log_marginal_likelihood=log_ml,
                    dic_unreliable=dic_unreliable, waic_unreliable=unreliable,
                    n_negative_pwaic=n_neg)


def criteria_from_fit(fit_result: FitResult) -> Criteria:
    """Recompute the criteria from the fit's retained predictive summaries."""
    if fit_result.criteria is None:
        raise ModelError("fit was run without criteria; predictive summaries missing")
    return fit_result.criteria


def exceedance(fit_result: FitResult, term: str, threshold: float = 0.0) -> GridField:
    """Posterior probability that a disease field exceeds the threshold,
    cell by cell, mixing the Gaussian approximations over the design."""
    if fit_result.model_id not in (1, 3):
        raise ModelError("exceedance maps need disease-specific fields (model 1 or 3)")
    if term not in fit_result.fields:
        raise ModelError(f"fit has no gridded field {term!r}")
    if fit_result.grid is None:
        raise ModelError("fit was run without a prediction grid")
    f = fit_result.fields[term]
    sd = np.sqrt(np.maximum(f.var, 1e-300))
    probs = norm.sf((threshold - f.mean) / sd)
    mixed = (fit_result.grid_weights[:, None] * probs).sum(axis=0)
    grid = fit_result.grid
    flat = np.full(grid.ny * grid.nx, np.nan)
    flat[fit_result.field_cells] = mixed
    return GridField(grid, flat.reshape(grid.ny, grid.nx), fit_result.field_mask)
