"""Joint multivariate log-Gaussian Cox models as Poisson pseudo-likelihoods.

Point patterns are augmented into 0/1 pseudo-observations with integration
weights (per-pattern Voronoi cells, or the dual-mesh scheme), then stacked
into one model: a shared baseline field entering every likelihood block,
disease-specific residual fields, distance-based exposure effects and
fixed-effect confounders. Four model variants are supported:

    0: baseline field only          log l_i = a_i + S0(x)
    1: + disease fields             log l_i = a_i + S0(x) + S_i(x)
    2: + exposure effects           log l_i = a_i + S0(x) + F_ij(x)
    3: both                         log l_i = a_i + S0(x) + F_ij(x) + S_i(x)

with the control block always a_0 + S0(x).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import shapely
from scipy.sparse import csr_matrix, diags, hstack as sparse_hstack
from scipy.spatial import cKDTree
from shapely.geometry import Polygon

from .errors import ModelError
from .geometry import (Mesh, PointPattern, Window, distance_to_source,
                       voronoi_cells)
from .latent import GmrfTerm, rw1_term, spde1d_term, spde2d_term
from .smoothing import GridField

__all__ = [
    "ModelSpec", "AugmentedData", "AssembledModel", "BlockInfo",
    "PoissonPseudoLikelihood", "GaussianLikelihood",
    "augment", "dual_mesh_weights", "assemble", "effect_difference",
    "EffectDifference",
]

EXPOSURE_FORMS = ("fixed", "rw1", "spde1")


@dataclass(frozen=True)
class ModelSpec:
    """Configuration of one of the four model variants."""

    model: int
    exposure: Optional[str] = None
    sources: tuple[tuple[float, float], ...] = ()
    confounders: tuple[str, ...] = ()
    weight_scheme: str = "voronoi"
    mesh_max_edge: Optional[float] = None
    mesh_extension: Optional[float] = None
    exposure_knots: int = 20
    range_prior: tuple[float, float] = (5.0, 0.95)
    sd_prior: tuple[float, float] = (10.0, 0.01)
    rw1_gamma: tuple[float, float] = (1.0, 5e-5)
    intercept_precision: float = 1e-6
    fixed_effect_precision: float = 1000.0
    include_baseline: bool = True

    def __post_init__(self):
        if self.model not in (0, 1, 2, 3):
            raise ModelError(f"model must be 0..3, got {self.model}")
        if self.model in (0, 1):
            if self.exposure is not None:
                raise ModelError(f"model {self.model} takes no exposure term")
        else:
            if self.exposure not in EXPOSURE_FORMS:
                raise ModelError(f"model {self.model} needs an exposure form from "
                                 f"{EXPOSURE_FORMS}, got {self.exposure!r}")
            if len(self.sources) < 1:
                raise ModelError(f"model {self.model} needs at least one source location")
        if self.weight_scheme not in ("voronoi", "dual-mesh"):
            raise ModelError(f"unknown weight scheme {self.weight_scheme!r}")
        if self.exposure_knots < 2:
            raise ModelError("exposure_knots must be at least 2")
        object.__setattr__(self, "sources",
                           tuple((float(x), float(y)) for x, y in self.sources))
        object.__setattr__(self, "confounders", tuple(self.confounders))

    @property
    def has_disease_fields(self) -> bool:
        return self.model in (1, 3)

    @property
    def has_exposure(self) -> bool:
        return self.model in (2, 3)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "exposure": self.exposure,
            "sources": [list(s) for s in self.sources],
            "confounders": list(self.confounders),
            "weight_scheme": self.weight_scheme,
            "mesh_max_edge": self.mesh_max_edge,
            "mesh_extension": self.mesh_extension,
            "exposure_knots": self.exposure_knots,
            "range_prior": list(self.range_prior),
            "sd_prior": list(self.sd_prior),
            "rw1_gamma": list(self.rw1_gamma),
            "intercept_precision": self.intercept_precision,
            "fixed_effect_precision": self.fixed_effect_precision,
            "include_baseline": self.include_baseline,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        kw = dict(d)
        for key in ("sources",):
            if key in kw:
                kw[key] = tuple(tuple(s) for s in kw[key])
        for key in ("confounders",):
            if key in kw:
                kw[key] = tuple(kw[key])
        for key in ("range_prior", "sd_prior", "rw1_gamma"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


# ---------------------------------------------------------------------------
# Augmentation: point patterns -> Poisson pseudo-observations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentedData:
    """Stacked pseudo-observations for all likelihood blocks.

    Observed events carry y = 1 and weight 0; dummy integration points
    carry y = 0 and their cell area as weight. `block` is the likelihood
    block index (0 controls, 1..K diseases).
    """

    y: np.ndarray
    weight: np.ndarray
    block: np.ndarray
    points: np.ndarray
    covariates: Optional[np.ndarray]
    covariate_names: tuple[str, ...]
    scheme: str
    window_area: float
    counts: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def n_blocks(self) -> int:
        return int(self.block.max()) + 1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y_coord", "block", "obs", "weight",
                             *self.covariate_names])
            for i in range(self.n_rows):
                row = [repr(float(self.points[i, 0])), repr(float(self.points[i, 1])),
                       int(self.block[i]), int(self.y[i]), repr(float(self.weight[i]))]
                if self.covariates is not None:
                    row += [repr(float(v)) for v in self.covariates[i]]
                writer.writerow(row)


def _polygon_moments(geom) -> tuple[float, float, float]:
    """(area, integral of x, integral of y) over a polygonal geometry."""

    def ring_moments(coords):
        c = np.asarray(coords)
        x0, y0 = c[:-1, 0], c[:-1, 1]
        x1, y1 = c[1:, 0], c[1:, 1]
        cross = x0 * y1 - x1 * y0
        a = 0.5 * cross.sum()
        mx = (cross * (x0 + x1)).sum() / 6.0
        my = (cross * (y0 + y1)).sum() / 6.0
        return a, mx, my

    if geom.is_empty:
        return 0.0, 0.0, 0.0
    polys = [geom] if isinstance(geom, Polygon) else \
        [g for g in getattr(geom, "geoms", []) if isinstance(g, Polygon)]
    A = Mx = My = 0.0
    for poly in polys:
        a, mx, my = ring_moments(poly.exterior.coords)
        s = 1.0 if a >= 0 else -1.0
        A += s * a
        Mx += s * mx
        My += s * my
        for hole in poly.interiors:
            a, mx, my = ring_moments(hole.coords)
            s = 1.0 if a >= 0 else -1.0
            A -= s * a
            Mx -= s * mx
            My -= s * my
    return A, Mx, My


def dual_mesh_weights(mesh: Mesh, window: Window) -> np.ndarray:
    """Integral of each piecewise-linear basis function over the window.

    Interior triangles contribute area/3 per vertex; triangles cut by the
    window boundary are integrated exactly via polygon moments (the basis
    functions are linear, so the first moments suffice). The weights sum
    to the window area.
    """
    verts = mesh.vertices[mesh.triangles]
    tris = shapely.polygons(verts)
    covered = shapely.covers(window.polygon, tris)
    intersecting = shapely.intersects(window.polygon, tris)
    weights = np.zeros(mesh.n_vertices)

    areas = mesh.triangle_areas
    full = covered
    np.add.at(weights, mesh.triangles[full].ravel(),
              np.repeat(areas[full] / 3.0, 3))

    for t in np.flatnonzero(intersecting & ~covered):
        tri = mesh.triangles[t]
        p = mesh.vertices[tri]
        piece = window.polygon.intersection(tris[t])
        A, Mx, My = _polygon_moments(piece)
        if A <= 0:
            continue
        # linear coefficients of each basis function on this triangle
        M = np.column_stack([p, np.ones(3)])
        coef = np.linalg.solve(M, np.eye(3))  # columns: [a, b, c] per vertex
        for k in range(3):
            a, b, c = coef[0, k], coef[1, k], coef[2, k]
            weights[tri[k]] += a * Mx + b * My + c * A
    return weights


def augment(pattern: PointPattern, window: Window, scheme: str = "voronoi",
            mesh: Optional[Mesh] = None,
            covariate_rasters: Optional[dict[str, GridField]] = None) -> AugmentedData:
    """Augment a marked pattern into Poisson pseudo-observations.

    Both schemes produce, per likelihood block, one y = 1 row per observed
    point and y = 0 rows whose weights partition the window area. The
    Voronoi scheme tessellates each pattern separately and places dummies
    at the observed points; the dual-mesh scheme places dummies at mesh
    vertices with clipped basis-function integrals as weights.
    """
    if scheme not in ("voronoi", "dual-mesh"):
        raise ModelError(f"unknown weight scheme {scheme!r}")
    if pattern.n == 0:
        raise ModelError("cannot augment an empty pattern")
    n_types = pattern.n_types
    counts = pattern.counts()
    for i in range(n_types):
        if counts[i] == 0:
            raise ModelError(f"mark {i} has no points; every block needs at least one")

    if scheme == "dual-mesh":
        if mesh is None:
            raise ModelError("dual-mesh augmentation requires a mesh")
        dual_w = dual_mesh_weights(mesh, window)
        dummy_sel = dual_w > 0
        dummy_pts = mesh.vertices[dummy_sel]
        dummy_w = dual_w[dummy_sel]

    ys, ws, blocks, pts, covs = [], [], [], [], []
    has_cov = pattern.covariates is not None
    for i in range(n_types):
        sub = pattern.subset(i)
        ys.append(np.ones(sub.n))
        ws.append(np.zeros(sub.n))
        blocks.append(np.full(sub.n, i))
        pts.append(sub.points)
        if has_cov:
            covs.append(sub.covariates)

        if scheme == "voronoi":
            cells, _ = voronoi_cells(sub.points, window)
            areas = np.array([c.area for c in cells])
            d_pts, d_w = sub.points, areas
            d_cov = sub.covariates if has_cov else None
        else:
            d_pts, d_w = dummy_pts, dummy_w
            d_cov = None
            if has_cov:
                d_cov = _impute_covariates(sub, d_pts, pattern.covariate_names,
                                           covariate_rasters)
        ys.append(np.zeros(len(d_pts)))
        ws.append(d_w)
        blocks.append(np.full(len(d_pts), i))
        pts.append(d_pts)
        if has_cov:
            covs.append(d_cov)

    return AugmentedData(
        y=np.concatenate(ys),
        weight=np.concatenate(ws),
        block=np.concatenate(blocks).astype(int),
        points=np.vstack(pts),
        covariates=np.vstack(covs) if has_cov else None,
        covariate_names=pattern.covariate_names,
        scheme=scheme,
        window_area=window.area,
        counts=counts,
    )


def _impute_covariates(sub: PointPattern, targets: np.ndarray,
                       names: tuple[str, ...],
                       rasters: Optional[dict[str, GridField]]) -> np.ndarray:
    """Covariates at dummy locations: raster lookup when available, else
    nearest observed point of the same block."""
    tree = cKDTree(sub.points)
    _, nearest = tree.query(targets)
    out = sub.covariates[nearest].copy()
    if rasters:
        for k, name in enumerate(names):
            if name in rasters:
                vals = rasters[name].value_at(targets)
                ok = np.isfinite(vals)
                out[ok, k] = vals[ok]
    return out


# ---------------------------------------------------------------------------
# Likelihoods
# ---------------------------------------------------------------------------

class PoissonPseudoLikelihood:
    """Poisson pseudo-likelihood: ll_k = y_k eta_k - w_k exp(eta_k).

    The normalizing constants are dropped; they cancel in every comparison
    made on a fixed augmentation.
    """

    name = "poisson"

    @staticmethod
    def loglik(eta, y, w):
        with np.errstate(over="ignore"):
            return float(np.sum(y * eta - w * np.exp(eta)))

    @staticmethod
    def grad(eta, y, w):
        with np.errstate(over="ignore"):
            return y - w * np.exp(eta)

    @staticmethod
    def curvature(eta, y, w):
        with np.errstate(over="ignore"):
            return w * np.exp(eta)


class GaussianLikelihood:
    """Gaussian observation test hook: y_k ~ N(eta_k, 1/prec_k).

    Makes the inner problem exactly quadratic, so Newton converges in one
    step and the Laplace evidence is exact.
    """

    name = "gaussian"

    def __init__(self, precision):
        self.precision = np.asarray(precision, dtype=float)

    def loglik(self, eta, y, w):
        p = np.broadcast_to(self.precision, eta.shape)
        return float(np.sum(0.5 * np.log(p / (2.0 * math.pi)) - 0.5 * p * (y - eta) ** 2))

    def grad(self, eta, y, w):
        p = np.broadcast_to(self.precision, eta.shape)
        return p * (y - eta)

    def curvature(self, eta, y, w):
        return np.broadcast_to(self.precision, eta.shape).copy()


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockInfo:
    """One contiguous slice of the latent vector."""

    name: str
    start: int
    size: int
    kind: str              # intercept | spatial2d | distance1d | rw1 | fixed
    term: Optional[GmrfTerm] = None
    disease: Optional[int] = None
    hyper_start: int = 0
    n_hyper: int = 0
    gaussian_precision: Optional[float] = None

    @property
    def stop(self) -> int:
        return self.start + self.size

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)


@dataclass(frozen=True)
class AssembledModel:
    """Augmented data plus latent structure: everything inference needs."""

    spec: ModelSpec
    data: AugmentedData
    mesh: Optional[Mesh]
    Z: csr_matrix
    blocks: tuple[BlockInfo, ...]
    theta_names: tuple[str, ...]
    likelihood: object
    distances: Optional[np.ndarray] = None  # (n_rows, n_sources)

    @property
    def n_latent(self) -> int:
        return self.Z.shape[1]

    @property
    def n_rows(self) -> int:
        return self.Z.shape[0]

    @property
    def n_theta(self) -> int:
        return len(self.theta_names)

    @property
    def n_diseases(self) -> int:
        return self.data.n_blocks - 1

    def block(self, name: str) -> BlockInfo:
        for b in self.blocks:
            if b.name == name:
                return b
        raise ModelError(f"no latent block named {name!r}")

    def has_block(self, name: str) -> bool:
        return any(b.name == name for b in self.blocks)

    def theta_init(self) -> np.ndarray:
        out = np.zeros(self.n_theta)
        for b in self.blocks:
            if b.term is not None:
                out[b.hyper_start:b.hyper_start + b.n_hyper] = b.term.theta_init()
        return out

    def prior_precision(self, theta: np.ndarray) -> csr_matrix:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != self.n_theta:
            raise ModelError(f"expected {self.n_theta} hyperparameters, got {theta.size}")
        diag = np.zeros(self.n_latent)
        parts = []
        for b in self.blocks:
            if b.term is None:
                diag[b.slice] = b.gaussian_precision
            else:
                Q = b.term.precision(theta[b.hyper_start:b.hyper_start + b.n_hyper])
                parts.append((b.start, Q))
        out = diags(diag, format="lil")
        for start, Q in parts:
            out[start:start + Q.shape[0], start:start + Q.shape[0]] = Q
        return out.tocsr()

    def rank_def_jitter(self, Q_prior: csr_matrix) -> Optional[csr_matrix]:
        """Tiny diagonal lift on rank-deficient blocks so the prior precision
        factorizes; the sum-to-zero constraints make the lifted direction
        irrelevant in the evidence (cancellation is exact as the lift -> 0)."""
        d = np.zeros(self.n_latent)
        any_def = False
        diag = Q_prior.diagonal()
        for b in self.blocks:
            if b.term is not None and b.term.rank_def > 0:
                d[b.slice] = 1e-8 * max(diag[b.slice].mean(), 1e-12)
                any_def = True
        return diags(d, format="csr") if any_def else None

    def constraints(self) -> Optional[np.ndarray]:
        """Sum-to-zero constraint rows (intrinsic blocks and constrained
        exposure smooths)."""
        rows = []
        for b in self.blocks:
            if b.term is not None and b.term.sum_to_zero:
                row = np.zeros(self.n_latent)
                row[b.slice] = 1.0
                rows.append(row)
        return np.vstack(rows) if rows else None

    def log_prior_theta(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        total = 0.0
        for b in self.blocks:
            if b.term is not None:
                total += b.term.log_prior(theta[b.hyper_start:b.hyper_start + b.n_hyper])
        return total

    def predictor(self, u: np.ndarray) -> np.ndarray:
        return self.Z @ np.asarray(u, dtype=float)

    def with_likelihood(self, likelihood) -> "AssembledModel":
        return replace(self, likelihood=likelihood)

    def hyper_report(self, theta: np.ndarray, theta_sd: Optional[np.ndarray] = None) -> list[dict]:
        """Natural-scale summaries of every hyperparameter (delta method sd)."""
        theta = np.asarray(theta, dtype=float).reshape(-1)
        out = []
        for b in self.blocks:
            if b.term is None:
                continue
            for k, h in enumerate(b.term.hyperparameters):
                j = b.hyper_start + k
                entry = {"name": h.name, "block": b.name, "kind": h.natural_name,
                         "internal": float(theta[j]), "value": float(math.exp(theta[j]))}
                if theta_sd is not None:
                    entry["sd"] = float(math.exp(theta[j]) * theta_sd[j])
                out.append(entry)
        return out


def _block_indicator_column(block: np.ndarray, i: int, values: np.ndarray) -> csr_matrix:
    sel = np.flatnonzero(block == i)
    vals = values[sel] if values.ndim else np.full(sel.size, float(values))
    return csr_matrix((vals, (sel, np.zeros(sel.size, dtype=int))),
                      shape=(block.size, 1))


def _mask_rows(A: csr_matrix, keep: np.ndarray) -> csr_matrix:
    mask = diags(keep.astype(float), format="csr")
    return (mask @ A).tocsr()


def assemble(spec: ModelSpec, data: AugmentedData, mesh: Optional[Mesh] = None,
             likelihood=None) -> AssembledModel:
    """Stack latent blocks and build the global row-to-latent projector.

    The predictor of a control row is a_0 + S0(x); a case row of disease i
    gets a_i + S0(x) plus the exposure and disease-specific terms its model
    variant includes.
    """
    K = data.n_blocks - 1
    if spec.has_exposure and K < 1:
        raise ModelError("exposure models need at least one disease block")
    if spec.include_baseline and mesh is None:
        raise ModelError("assembling a spatial model requires a mesh")
    if spec.confounders:
        if data.covariates is None:
            raise ModelError("spec lists confounders but the data has no covariates")
        for c in spec.confounders:
            if c not in data.covariate_names:
                raise ModelError(f"confounder {c!r} not among data covariates "
                                 f"{data.covariate_names}")
            col = data.covariates[:, data.covariate_names.index(c)]
            if not np.isfinite(col).all():
                bad = int(np.flatnonzero(~np.isfinite(col))[0])
                raise ModelError(f"confounder {c!r} is missing (non-finite) at row {bad}")

    n = data.n_rows
    block_idx = data.block
    cols: list[csr_matrix] = []
    blocks: list[BlockInfo] = []
    theta_names: list[str] = []
    pos = 0
    hyper_pos = 0

    def add_block(name, kind, mat, term=None, disease=None, gaussian_precision=None):
        nonlocal pos, hyper_pos
        nh = term.n_hyper if term is not None else 0
        blocks.append(BlockInfo(name=name, start=pos, size=mat.shape[1], kind=kind,
                                term=term, disease=disease, hyper_start=hyper_pos,
                                n_hyper=nh, gaussian_precision=gaussian_precision))
        cols.append(mat.tocsr())
        pos += mat.shape[1]
        if term is not None:
            theta_names.extend(h.name for h in term.hyperparameters)
            hyper_pos += nh

    icols = sparse_hstack([
        _block_indicator_column(block_idx, i, np.ones(())) for i in range(K + 1)
    ]).tocsr()
    add_block("intercepts", "intercept", icols,
              gaussian_precision=spec.intercept_precision)

    A_all = None
    if spec.include_baseline:
        s0 = spde2d_term(mesh, name="S0", range_prior=spec.range_prior,
                         sd_prior=spec.sd_prior)
        A_all = s0.projector(data.points)
        add_block("S0", "spatial2d", A_all, term=s0)

    if spec.has_disease_fields:
        fem = None
        for i in range(1, K + 1):
            si = spde2d_term(mesh, name=f"S{i}", range_prior=spec.range_prior,
                             sd_prior=spec.sd_prior)
            A_i = _mask_rows(A_all if A_all is not None else si.projector(data.points),
                             block_idx == i)
            add_block(f"S{i}", "spatial2d", A_i, term=si, disease=i)

    distances = None
    if spec.has_exposure:
        sources = np.asarray(spec.sources, dtype=float)
        distances = np.column_stack([
            distance_to_source(data.points, src) for src in sources
        ])
        for i in range(1, K + 1):
            for j in range(len(spec.sources)):
                d_col = distances[:, j]
                name = f"F{i}_src{j}"
                if spec.exposure == "fixed":
                    col = _block_indicator_column(block_idx, i, d_col)
                    add_block(name, "fixed", col, disease=i,
                              gaussian_precision=spec.fixed_effect_precision)
                else:
                    d_max = float(d_col.max())
                    if spec.exposure == "rw1":
                        term = rw1_term(spec.exposure_knots, d_max, name=name,
                                        gamma_prior=spec.rw1_gamma)
                    else:
                        knots = np.linspace(0.0, d_max, max(spec.exposure_knots, 3))
                        term = spde1d_term(knots, name=name,
                                           range_prior=spec.range_prior,
                                           sd_prior=spec.sd_prior,
                                           sum_to_zero=True)
                    P = _mask_rows(term.projector(d_col), block_idx == i)
                    add_block(name, term.kind, P, term=term, disease=i)

    for i in range(1, K + 1):
        for c in spec.confounders:
            col_vals = data.covariates[:, data.covariate_names.index(c)]
            col = _block_indicator_column(block_idx, i, col_vals)
            add_block(f"beta_{c}_d{i}", "fixed", col, disease=i,
                      gaussian_precision=spec.fixed_effect_precision)

    Z = sparse_hstack(cols).tocsr()
    return AssembledModel(spec=spec, data=data, mesh=mesh, Z=Z,
                          blocks=tuple(blocks), theta_names=tuple(theta_names),
                          likelihood=likelihood or PoissonPseudoLikelihood(),
                          distances=distances)


# ---------------------------------------------------------------------------
# Comparison of disease-specific fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EffectDifference:
    """Posterior mean and sd surfaces of S_u - S_v."""

    mean: GridField
    sd: GridField
    disease_u: int
    disease_v: int


def effect_difference(fit, disease_u: int, disease_v: int) -> EffectDifference:
    """Pointwise posterior of the difference between two disease fields.

    Uses the joint Gaussian approximation at each explored hyperparameter
    point, so the cross-covariance between the two fields is honored.
    Differences near zero indicate similar residual spatial variation.
    """
    if fit.model_id not in (1, 3):
        raise ModelError("effect differences need disease-specific fields (model 1 or 3)")
    for d in (disease_u, disease_v):
        if f"S{d}" not in fit.fields:
            raise ModelError(f"fit has no disease field S{d}")
    grid = fit.grid
    mask = fit.field_mask
    if disease_u == disease_v:
        zero = np.zeros((grid.ny, grid.nx))
        return EffectDifference(GridField(grid, zero, mask),
                                GridField(grid, zero.copy(), mask),
                                disease_u, disease_v)
    fu = fit.fields[f"S{disease_u}"]
    fv = fit.fields[f"S{disease_v}"]
    key = (min(disease_u, disease_v), max(disease_u, disease_v))
    cross = fit.field_cross[key]
    w = fit.grid_weights[:, None]
    mean_j = fu.mean - fv.mean                       # (G, cells)
    var_j = fu.var + fv.var - 2.0 * cross
    mean = (w * mean_j).sum(axis=0)
    second = (w * (var_j + mean_j ** 2)).sum(axis=0)
    sd = np.sqrt(np.maximum(second - mean ** 2, 0.0))
    shape = (grid.ny, grid.nx)
    return EffectDifference(GridField(grid, mean.reshape(shape), mask),
                            GridField(grid, sd.reshape(shape), mask),
                            disease_u, disease_v)
