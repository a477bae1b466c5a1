"""Study windows, point patterns, triangular meshes and tessellation weights.

All coordinates are kilometers. The study window is a polygon (optionally
with holes); meshes are Delaunay triangulations of a deterministic point
lattice covering the window plus an extension buffer, so that identical
inputs always produce identical meshes. Piecewise-linear finite-element
matrices, barycentric projectors and Voronoi integration weights are built
on top of these types.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import shapely
from scipy.sparse import coo_matrix, csr_matrix, diags
from scipy.spatial import Delaunay, Voronoi, cKDTree
from shapely.geometry import Point, Polygon

from .errors import GeometryError, InputError

log = logging.getLogger(__name__)

_DUP_TOL = 1e-9  # km; duplicate-vertex tolerance
_GOLDEN_ANGLE = 2.399963229728653


def _close_ring(ring: np.ndarray) -> np.ndarray:
    """Return ring without a repeated closing vertex."""
    ring = np.asarray(ring, dtype=float)
    if ring.ndim != 2 or ring.shape[1] != 2 or ring.shape[0] < 3:
        raise GeometryError("a ring needs at least 3 distinct 2-D vertices")
    if np.allclose(ring[0], ring[-1]):
        ring = ring[:-1]
    if ring.shape[0] < 3:
        raise GeometryError("a ring needs at least 3 distinct 2-D vertices")
    return ring


@dataclass(frozen=True)
class Window:
    """Polygonal study region with optional holes, coordinates in km."""

    exterior: np.ndarray
    holes: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "exterior", _close_ring(self.exterior))
        object.__setattr__(self, "holes", tuple(_close_ring(h) for h in self.holes))
        poly = self.polygon
        if not poly.is_valid:
            raise GeometryError(f"invalid window polygon: {shapely.is_valid_reason(poly)}")
        if poly.area <= 0:
            raise GeometryError("window has zero area")
        outer = Polygon(self.exterior)
        for k, h in enumerate(self.holes):
            if not Polygon(h).within(outer):
                raise GeometryError(f"hole {k} is not strictly inside the exterior ring")

    @cached_property
    def polygon(self) -> Polygon:
        return Polygon(self.exterior, [h for h in self.holes])

    @property
    def area(self) -> float:
        return float(self.polygon.area)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return self.polygon.bounds

    @property
    def diameter(self) -> float:
        x0, y0, x1, y1 = self.bounds
        return math.hypot(x1 - x0, y1 - y0)

    def contains(self, points: np.ndarray, boundary: bool = True) -> np.ndarray:
        """Vectorized membership test; `boundary=True` includes the border."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if boundary:
            return shapely.intersects_xy(self.polygon, pts[:, 0], pts[:, 1])
        return shapely.contains_xy(self.polygon, pts[:, 0], pts[:, 1])

    def distance_to_boundary(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        geoms = shapely.points(pts)
        return shapely.distance(geoms, self.polygon.boundary)

    @classmethod
    def rectangle(cls, x0: float, y0: float, x1: float, y1: float) -> "Window":
        return cls(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))

    @classmethod
    def from_geojson(cls, source) -> "Window":
        """Build a window from a GeoJSON Polygon (path, dict, or Feature)."""
        if isinstance(source, (str, bytes, os.PathLike)) or hasattr(source, "read"):
            try:
                if hasattr(source, "read"):
                    obj = json.load(source)
                else:
                    with open(source) as fh:
                        obj = json.load(fh)
            except FileNotFoundError as exc:
                raise InputError(f"window file not found: {source}") from exc
            except json.JSONDecodeError as exc:
                raise InputError(f"window file is not valid JSON: {source}: {exc}") from exc
        else:
            obj = source
        geom = obj
        if geom.get("type") == "FeatureCollection":
            feats = geom.get("features") or []
            if not feats:
                raise InputError("GeoJSON FeatureCollection contains no features")
            geom = feats[0]
        if geom.get("type") == "Feature":
            geom = geom.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise InputError(f"expected a GeoJSON Polygon, got {geom.get('type')!r}")
        rings = geom.get("coordinates") or []
        if not rings:
            raise InputError("GeoJSON Polygon has no coordinate rings")
        ext = np.asarray(rings[0], dtype=float)
        holes = tuple(np.asarray(r, dtype=float) for r in rings[1:])
        return cls(ext, holes)

    def to_geojson_dict(self) -> dict:
        def closed(r):
            return np.vstack([r, r[:1]]).tolist()

        return {
            "type": "Polygon",
            "coordinates": [closed(self.exterior)] + [closed(h) for h in self.holes],
        }


@dataclass(frozen=True)
class PointPattern:
    """Typed event locations: mark 0 is the control set, marks 1..K diseases."""

    points: np.ndarray
    marks: np.ndarray
    covariates: Optional[np.ndarray] = None
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        marks = np.asarray(self.marks, dtype=int).reshape(-1)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "marks", marks)
        if pts.shape[0] != marks.shape[0]:
            raise InputError("points and marks must have the same length")
        if marks.size and marks.min() < 0:
            raise InputError("marks must be nonnegative integers")
        if self.covariates is not None:
            cov = np.asarray(self.covariates, dtype=float).reshape(pts.shape[0], -1)
            object.__setattr__(self, "covariates", cov)
            if len(self.covariate_names) != cov.shape[1]:
                raise InputError("covariate_names must match covariate columns")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def n_types(self) -> int:
        """Number of point types (controls + diseases)."""
        return int(self.marks.max()) + 1 if self.n else 0

    def counts(self) -> np.ndarray:
        return np.bincount(self.marks, minlength=self.n_types)

    def subset(self, mark: int) -> "PointPattern":
        sel = self.marks == mark
        cov = self.covariates[sel] if self.covariates is not None else None
        return PointPattern(self.points[sel], np.zeros(sel.sum(), dtype=int),
                            cov, self.covariate_names)

    def validate_inside(self, window: Window) -> None:
        inside = window.contains(self.points)
        if not inside.all():
            bad = int(np.flatnonzero(~inside)[0])
            raise InputError(f"point {bad} at {tuple(self.points[bad])} lies outside the window")

    @classmethod
    def from_csv(cls, path) -> "PointPattern":
        """Read `x,y,mark[,cov1,...]` rows; a header line is required."""
        try:
            fh = open(path, newline="")
        except FileNotFoundError as exc:
            raise InputError(f"pattern file not found: {path}") from exc
        with fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise InputError(f"pattern file is empty: {path}")
            cols = [c.strip() for c in reader.fieldnames]
            for req in ("x", "y", "mark"):
                if req not in cols:
                    raise InputError(f"pattern CSV must have a '{req}' column: {path}")
            cov_names = tuple(c for c in cols if c not in ("x", "y", "mark"))
            pts, marks, covs = [], [], []
            for ln, row in enumerate(reader, start=2):
                try:
                    pts.append((float(row["x"]), float(row["y"])))
                    marks.append(int(row["mark"]))
                    if cov_names:
                        covs.append([float(row[c]) for c in cov_names])
                except (TypeError, ValueError) as exc:
                    raise InputError(f"bad value in {path} line {ln}: {exc}") from exc
        cov = np.asarray(covs) if cov_names else None
        return cls(np.asarray(pts, dtype=float).reshape(-1, 2),
                   np.asarray(marks, dtype=int), cov, cov_names)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "mark", *self.covariate_names])
            for i in range(self.n):
                row = [repr(float(self.points[i, 0])), repr(float(self.points[i, 1])),
                       int(self.marks[i])]
                if self.covariates is not None:
                    row += [repr(float(v)) for v in self.covariates[i]]
                writer.writerow(row)


@dataclass(frozen=True)
class Mesh:
    """Triangulation with positively oriented triangles and boundary flags."""

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=int).reshape(-1, 3))
        object.__setattr__(self, "boundary", np.asarray(self.boundary, dtype=bool).reshape(-1))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    @cached_property
    def _trifinder(self):
        from matplotlib.tri import Triangulation

        tri = Triangulation(self.vertices[:, 0], self.vertices[:, 1], self.triangles)
        return tri.get_trifinder()

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Containing triangle index per point, -1 if outside the mesh."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.asarray(self._trifinder(pts[:, 0], pts[:, 1]), dtype=int)

    def edge_lengths(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return np.linalg.norm(e, axis=2)


def _lattice(bounds, spacing) -> np.ndarray:
    x0, y0, x1, y1 = bounds
    xs = np.arange(x0, x1 + 0.5 * spacing, spacing)
    ys = np.arange(y0, y1 + 0.5 * spacing, spacing)
    xx, yy = np.meshgrid(xs, ys)
    return np.column_stack([xx.ravel(), yy.ravel()])


def _densify_ring(ring: np.ndarray, spacing: float) -> np.ndarray:
    out = []
    n = ring.shape[0]
    for i in range(n):
        a, b = ring[i], ring[(i + 1) % n]
        seg = np.linalg.norm(b - a)
        k = max(1, int(math.ceil(seg / spacing)))
        t = np.arange(k) / k
        out.append(a[None, :] * (1 - t[:, None]) + b[None, :] * t[:, None])
    return np.vstack(out)


def _dedupe(points: np.ndarray) -> np.ndarray:
    key = np.round(points / _DUP_TOL).astype(np.int64)
    _, idx = np.unique(key, axis=0, return_index=True)
    return points[np.sort(idx)]


def build_mesh(window: Window, max_edge_inner: float,
               outer_extension: Optional[float] = None) -> Mesh:
    """Triangulate the window plus an extension buffer.

    Points are laid on a square lattice (spacing chosen so Delaunay edges
    stay below `max_edge_inner` inside the window) together with densified
    boundary rings; the buffer gets a coarser lattice. The construction is
    fully deterministic. The returned mesh covers the convex hull of the
    generated points, which always contains the window.
    """
    if max_edge_inner <= 0:
        raise GeometryError("max_edge_inner must be positive")
    if outer_extension is None:
        outer_extension = 0.2 * window.diameter
    if outer_extension < 0:
        raise GeometryError("outer_extension must be nonnegative")
    if window.area <= 0:
        raise GeometryError("cannot mesh a window with zero area")

    poly = window.polygon
    spacing = max_edge_inner / math.sqrt(2.0)
    for _ in range(6):
        pts = [_densify_ring(window.exterior, spacing)]
        for h in window.holes:
            pts.append(_densify_ring(h, spacing))
        inner = _lattice(window.bounds, spacing)
        keep = shapely.contains_xy(poly, inner[:, 0], inner[:, 1])
        inner = inner[keep]
        if inner.size:
            d = shapely.distance(shapely.points(inner), poly.boundary)
            inner = inner[d > 0.35 * spacing]
        pts.append(inner)

        if outer_extension > 0:
            buffered = poly.buffer(outer_extension, quad_segs=4)
            out_spacing = 2.0 * spacing
            ring = np.asarray(buffered.exterior.coords)[:-1]
            pts.append(_densify_ring(ring, out_spacing))
            outer = _lattice(buffered.bounds, out_spacing)
            in_buf = shapely.contains_xy(buffered, outer[:, 0], outer[:, 1])
            outer = outer[in_buf]
            if outer.size:
                d_win = shapely.distance(shapely.points(outer), poly)
                d_ring = shapely.distance(shapely.points(outer), buffered.exterior)
                outer = outer[(d_win > 0.5 * spacing) & (d_ring > 0.35 * out_spacing)]
            pts.append(outer)

        vertices = _dedupe(np.vstack([p for p in pts if p.size]))
        tri = Delaunay(vertices)
        triangles = tri.simplices.copy()
        p = vertices[triangles]
        signed = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
        flip = signed < 0
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
        keep_tri = np.abs(signed) > 1e-12
        triangles = triangles[keep_tri]

        boundary = np.zeros(vertices.shape[0], dtype=bool)
        boundary[np.unique(tri.convex_hull)] = True
        mesh = Mesh(vertices, triangles, boundary)

        centroids = vertices[triangles].mean(axis=1)
        is_inner = shapely.contains_xy(poly, centroids[:, 0], centroids[:, 1])
        if not is_inner.any() or mesh.edge_lengths()[is_inner].max() <= max_edge_inner + 1e-12:
            return mesh
        spacing *= 0.85
    raise GeometryError("mesh refinement failed to satisfy the edge-length bound")


def fem_matrices(mesh: Mesh) -> tuple[csr_matrix, csr_matrix]:
    """Lumped mass matrix C (diagonal) and stiffness matrix G for P1 elements.

    Sliver triangles (area < 1e-12) are rejected rather than silently
    assembled, since they poison the stiffness matrix.
    """
    areas = mesh.triangle_areas
    if (areas < 1e-12).any():
        bad = int(np.flatnonzero(areas < 1e-12)[0])
        raise GeometryError(f"sliver triangle {bad} with area {areas[bad]:.3e}")
    m = mesh.n_vertices
    tri = mesh.triangles
    p = mesh.vertices[tri]

    c_diag = np.zeros(m)
    np.add.at(c_diag, tri.ravel(), np.repeat(areas / 3.0, 3))

    # edge vectors opposite each vertex: G_local[i, j] = (e_i . e_j) / (4 A)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    rows, cols, vals = [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(tri[:, i])
            cols.append(tri[:, j])
            vals.append(np.einsum("td,td->t", e[:, i], e[:, j]) / (4.0 * areas))
    G = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(m, m)).tocsr()
    C = diags(c_diag, format="csr")
    return C, G


def projector(mesh: Mesh, points: np.ndarray) -> csr_matrix:
    """Sparse barycentric interpolation matrix from mesh vertices to points.

    Each row holds the barycentric coordinates of one point within its
    containing triangle: nonnegative, summing to one, at most 3 nonzeros.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri_idx = mesh.locate(pts)
    if (tri_idx < 0).any():
        bad = int(np.flatnonzero(tri_idx < 0)[0])
        raise GeometryError(f"point {bad} at {tuple(pts[bad])} is outside the mesh")
    tris = mesh.triangles[tri_idx]
    a = mesh.vertices[tris[:, 0]]
    b = mesh.vertices[tris[:, 1]]
    c = mesh.vertices[tris[:, 2]]
    v0 = b - a
    v1 = c - a
    v2 = pts - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    w1 = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) / den
    w2 = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) / den
    bary = np.column_stack([1.0 - w1 - w2, w1, w2])
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    n = pts.shape[0]
    rows = np.repeat(np.arange(n), 3)
    return csr_matrix((bary.ravel(), (rows, tris.ravel())),
                      shape=(n, mesh.n_vertices))


def _perturb_duplicates(points: np.ndarray) -> tuple[np.ndarray, int]:
    """Deterministically nudge coincident points apart by multiples of 1e-9 km."""
    key = np.round(points / _DUP_TOL).astype(np.int64)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    if counts.max() <= 1:
        return points, 0
    out = points.copy()
    n_moved = 0
    seen: dict[int, int] = {}
    for i in range(points.shape[0]):
        g = int(inv[i])
        k = seen.get(g, 0)
        seen[g] = k + 1
        if k > 0:
            ang = _GOLDEN_ANGLE * (i + 1)
            out[i] = out[i] + _DUP_TOL * k * np.array([math.cos(ang), math.sin(ang)])
            n_moved += 1
    return out, n_moved


def voronoi_cells(points: np.ndarray, window: Window) -> tuple[list[Polygon], dict]:
    """Voronoi cells of `points` clipped to the window.

    Mirrors all generators across the four sides of an enlarged bounding
    box, which makes every original cell a finite polygon whose restriction
    to the box equals the true Voronoi cell.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    if n == 0:
        raise InputError("cannot tessellate an empty point set")
    pts, n_perturbed = _perturb_duplicates(pts)
    if n_perturbed:
        log.warning("voronoi_cells: perturbed %d duplicate points by ~1e-9 km", n_perturbed)

    x0, y0, x1, y1 = window.bounds
    m = max(1e-3 * window.diameter, 1e-6)
    x0, y0, x1, y1 = x0 - m, y0 - m, x1 + m, y1 + m
    mirrored = np.vstack([
        pts,
        np.column_stack([2 * x0 - pts[:, 0], pts[:, 1]]),
        np.column_stack([2 * x1 - pts[:, 0], pts[:, 1]]),
        np.column_stack([pts[:, 0], 2 * y0 - pts[:, 1]]),
        np.column_stack([pts[:, 0], 2 * y1 - pts[:, 1]]),
    ])
    vor = Voronoi(mirrored)
    poly = window.polygon
    cells = []
    for i in range(n):
        region = vor.regions[vor.point_region[i]]
        if -1 in region or len(region) < 3:
            raise GeometryError(f"unbounded Voronoi cell for point {i}")
        verts = vor.vertices[region]
        center = verts.mean(axis=0)
        order = np.argsort(np.arctan2(verts[:, 1] - center[1], verts[:, 0] - center[0]))
        cell = Polygon(verts[order]).intersection(poly)
        cells.append(cell)
    diagnostics = {"n_perturbed": n_perturbed}
    return cells, diagnostics


def voronoi_weights(pattern: PointPattern, window: Window) -> np.ndarray:
    """Areas of the window-clipped Voronoi cells of the pattern's points (km^2)."""
    if pattern.n == 0:
        raise InputError("cannot compute Voronoi weights for an empty pattern")
    cells, _ = voronoi_cells(pattern.points, window)
    return np.array([c.area for c in cells])


def distance_to_source(points: np.ndarray, source: Sequence[float]) -> np.ndarray:
    """Euclidean distances (km) from each point to a single source location."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    src = np.asarray(source, dtype=float).reshape(2)
    return np.hypot(pts[:, 0] - src[0], pts[:, 1] - src[1])
