import json
import math

import numpy as np
import pytest
import shapely
from hypothesis import given, settings
from hypothesis import strategies as st

from lgcpmap.errors import GeometryError, InputError
from lgcpmap.geometry import (Mesh, PointPattern, Window, build_mesh,
                              distance_to_source, fem_matrices, projector,
                              voronoi_cells, voronoi_weights)


# ---------------------------------------------------------------------------
# Window
# ---------------------------------------------------------------------------

def test_window_area_and_bounds(unit_square):
    assert unit_square.area == pytest.approx(1.0)
    assert unit_square.bounds == (0.0, 0.0, 1.0, 1.0)


def test_window_zero_area_rejected():
    with pytest.raises(GeometryError):
        Window(np.array([[0, 0], [1, 0], [2, 0]]))


def test_window_self_intersecting_rejected():
    with pytest.raises(GeometryError):
        Window(np.array([[0, 0], [1, 1], [1, 0], [0, 1]]))


def test_window_hole_outside_rejected():
    with pytest.raises(GeometryError):
        Window(np.array([[0, 0], [1, 0], [1, 1], [0, 1]]),
               holes=(np.array([[2, 2], [3, 2], [3, 3]]),))


def test_window_with_hole_area():
    w = Window(np.array([[0, 0], [4, 0], [4, 4], [0, 4]]),
               holes=(np.array([[1, 1], [2, 1], [2, 2], [1, 2]]),))
    assert w.area == pytest.approx(15.0)
    assert not w.contains(np.array([[1.5, 1.5]]))[0]


def test_window_geojson_round_trip(tmp_path, unit_square):
    d = unit_square.to_geojson_dict()
    path = tmp_path / "win.geojson"
    with open(path, "w") as fh:
        json.dump(d, fh)
    back = Window.from_geojson(path)
    assert np.allclose(back.exterior, unit_square.exterior)
    assert back.area == pytest.approx(unit_square.area)


def test_window_geojson_feature_wrapper(unit_square):
    feat = {"type": "Feature", "properties": {},
            "geometry": unit_square.to_geojson_dict()}
    back = Window.from_geojson(feat)
    assert back.area == pytest.approx(1.0)


def test_window_geojson_bad_type():
    with pytest.raises(InputError):
        Window.from_geojson({"type": "Point", "coordinates": [0, 0]})


# ---------------------------------------------------------------------------
# PointPattern
# ---------------------------------------------------------------------------

def test_pattern_counts_and_subsets():
    pts = np.array([[0.1, 0.1], [0.5, 0.5], [0.9, 0.9]])
    pat = PointPattern(pts, np.array([0, 1, 1]))
    assert pat.n_types == 2
    assert pat.counts().tolist() == [1, 2]
    sub = pat.subset(1)
    assert sub.n == 2 and (sub.marks == 0).all()


def test_pattern_outside_window_named(unit_square):
    pat = PointPattern(np.array([[0.5, 0.5], [2.0, 2.0]]), np.array([0, 0]))
    with pytest.raises(InputError, match="point 1"):
        pat.validate_inside(unit_square)


def test_pattern_csv_round_trip(tmp_path):
    pts = np.array([[0.25, 0.75], [0.5, 0.125]])
    pat = PointPattern(pts, np.array([0, 1]), covariates=np.array([[1.5], [-2.25]]),
                       covariate_names=("unemp",))
    path = tmp_path / "pat.csv"
    pat.to_csv(path)
    back = PointPattern.from_csv(path)
    assert np.array_equal(back.points, pts)
    assert np.array_equal(back.marks, pat.marks)
    assert np.array_equal(back.covariates, pat.covariates)
    assert back.covariate_names == ("unemp",)


def test_pattern_csv_requires_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0.1,0.2,0\n")
    with pytest.raises(InputError):
        PointPattern.from_csv(path)


def test_pattern_csv_missing_file():
    with pytest.raises(InputError, match="not found"):
        PointPattern.from_csv("/nonexistent/pattern.csv")


# ---------------------------------------------------------------------------
# Meshing
# ---------------------------------------------------------------------------

def test_mesh_inner_edges_below_max(unit_square):
    mesh = build_mesh(unit_square, 0.5, outer_extension=0.0)
    cent = mesh.vertices[mesh.triangles].mean(axis=1)
    inner = shapely.contains_xy(unit_square.polygon, cent[:, 0], cent[:, 1])
    assert mesh.edge_lengths()[inner].max() <= 0.5 + 1e-12


def test_mesh_zero_extension_covers_square_exactly(unit_square):
    mesh = build_mesh(unit_square, 0.5, outer_extension=0.0)
    assert mesh.triangle_areas.sum() == pytest.approx(1.0, abs=1e-6)


def test_mesh_finer_has_more_vertices(unit_square):
    coarse = build_mesh(unit_square, 0.5, outer_extension=0.0)
    fine = build_mesh(unit_square, 0.1, outer_extension=0.0)
    assert fine.n_vertices > coarse.n_vertices


def test_mesh_covers_window_with_buffer(unit_square):
    mesh = build_mesh(unit_square, 0.5, outer_extension=0.3)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, (500, 2))
    assert (mesh.locate(pts) >= 0).all()
    assert mesh.triangle_areas.sum() > 1.0


def test_mesh_degenerate_window_rejected():
    with pytest.raises(GeometryError):
        build_mesh(Window.rectangle(0, 0, 1, 1), max_edge_inner=-0.1)


def test_mesh_deterministic(unit_square):
    m1 = build_mesh(unit_square, 0.3, outer_extension=0.2)
    m2 = build_mesh(unit_square, 0.3, outer_extension=0.2)
    assert np.array_equal(m1.vertices, m2.vertices)
    assert np.array_equal(m1.triangles, m2.triangles)


def test_mesh_triangles_positively_oriented(coarse_mesh):
    assert (coarse_mesh.triangle_areas > 0).all()


# ---------------------------------------------------------------------------
# FEM matrices
# ---------------------------------------------------------------------------

def test_fem_mass_sums_to_mesh_area(coarse_mesh):
    C, _ = fem_matrices(coarse_mesh)
    assert C.diagonal().sum() == pytest.approx(coarse_mesh.triangle_areas.sum())


def test_fem_stiffness_annihilates_constants(coarse_mesh):
    _, G = fem_matrices(coarse_mesh)
    ones = np.ones(coarse_mesh.n_vertices)
    assert np.abs(G @ ones).max() < 1e-10


def test_fem_matrices_symmetric(coarse_mesh):
    C, G = fem_matrices(coarse_mesh)
    assert (abs(G - G.T)).max() < 1e-12
    assert (abs(C - C.T)).max() == 0.0


def test_fem_single_right_triangle():
    # unit right triangle: lumped mass entries are area/3 = 1/6 each, and the
    # stiffness matrix has the hand-assembled cotangent values
    mesh = Mesh(vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                triangles=np.array([[0, 1, 2]]),
                boundary=np.array([True, True, True]))
    C, G = fem_matrices(mesh)
    assert np.allclose(C.diagonal(), [1 / 6, 1 / 6, 1 / 6])
    expected_G = np.array([[1.0, -0.5, -0.5],
                           [-0.5, 0.5, 0.0],
                           [-0.5, 0.0, 0.5]])
    assert np.allclose(G.toarray(), expected_G)


def test_fem_sliver_triangle_rejected():
    mesh = Mesh(vertices=np.array([[0, 0], [1, 0], [0.5, 1e-14]]),
                triangles=np.array([[0, 2, 1]]),
                boundary=np.array([True, True, True]))
    with pytest.raises(GeometryError, match="sliver"):
        fem_matrices(mesh)


# ---------------------------------------------------------------------------
# Projector
# ---------------------------------------------------------------------------

def test_projector_at_vertex(coarse_mesh):
    v = 3
    A = projector(coarse_mesh, coarse_mesh.vertices[[v]])
    row = A.toarray()[0]
    assert row[v] == pytest.approx(1.0)
    assert row.sum() == pytest.approx(1.0)
    assert np.count_nonzero(row > 1e-12) == 1


def test_projector_edge_midpoint(coarse_mesh):
    tri = coarse_mesh.triangles[0]
    mid = 0.5 * (coarse_mesh.vertices[tri[0]] + coarse_mesh.vertices[tri[1]])
    row = projector(coarse_mesh, mid[None, :]).toarray()[0]
    nz = np.flatnonzero(row > 1e-9)
    assert set(nz) <= set(tri)
    assert row[tri[0]] == pytest.approx(0.5, abs=1e-9)
    assert row[tri[1]] == pytest.approx(0.5, abs=1e-9)


def test_projector_centroid(coarse_mesh):
    tri = coarse_mesh.triangles[0]
    cent = coarse_mesh.vertices[tri].mean(axis=0)
    row = projector(coarse_mesh, cent[None, :]).toarray()[0]
    assert np.allclose(row[tri], 1 / 3, atol=1e-9)


def test_projector_outside_names_point(coarse_mesh):
    pts = np.array([[0.5, 0.5], [55.0, 55.0]])
    with pytest.raises(GeometryError, match="point 1"):
        projector(coarse_mesh, pts)


def test_projector_rows_partition_unity(coarse_mesh):
    rng = np.random.default_rng(11)
    pts = rng.uniform(0.0, 1.0, size=(1000, 2))
    A = projector(coarse_mesh, pts)
    sums = np.asarray(A.sum(axis=1)).ravel()
    assert np.allclose(sums, 1.0, atol=1e-12)
    assert A.min() >= 0.0
    assert (np.diff(A.indptr) <= 3).all()


# ---------------------------------------------------------------------------
# Voronoi weights
# ---------------------------------------------------------------------------

def test_voronoi_single_point(unit_square):
    pat = PointPattern(np.array([[0.3, 0.4]]), np.array([0]))
    assert voronoi_weights(pat, unit_square) == pytest.approx([1.0])


def test_voronoi_two_symmetric_points(unit_square):
    pat = PointPattern(np.array([[0.25, 0.5], [0.75, 0.5]]), np.array([0, 0]))
    w = voronoi_weights(pat, unit_square)
    assert np.allclose(w, [0.5, 0.5])


def test_voronoi_partitions_window(unit_square):
    rng = np.random.default_rng(5)
    pat = PointPattern(rng.uniform(0, 1, (50, 2)), np.zeros(50, dtype=int))
    w = voronoi_weights(pat, unit_square)
    assert w.sum() == pytest.approx(1.0, abs=1e-6)
    assert (w > 0).all()


def test_voronoi_empty_pattern_rejected(unit_square):
    with pytest.raises(InputError):
        voronoi_weights(PointPattern(np.zeros((0, 2)), np.zeros(0, dtype=int)),
                        unit_square)


def test_voronoi_duplicate_points_perturbed(unit_square):
    pts = np.array([[0.5, 0.5], [0.5, 0.5], [0.2, 0.2]])
    cells, diag = voronoi_cells(pts, unit_square)
    assert diag["n_perturbed"] == 1
    total = sum(c.area for c in cells)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_voronoi_window_with_hole():
    w = Window(np.array([[0, 0], [4, 0], [4, 4], [0, 4]]),
               holes=(np.array([[1, 1], [3, 1], [3, 3], [1, 3]]),))
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 4, (80, 2))
    pts = pts[w.contains(pts)]
    pat = PointPattern(pts, np.zeros(len(pts), dtype=int))
    assert voronoi_weights(pat, w).sum() == pytest.approx(w.area, rel=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=1, max_value=40), st.integers(min_value=0, max_value=10_000))
def test_voronoi_partition_property(n, seed):
    w = Window.rectangle(0.0, 0.0, 2.0, 1.5)
    rng = np.random.default_rng(seed)
    pat = PointPattern(rng.uniform((0, 0), (2, 1.5), (n, 2)), np.zeros(n, dtype=int))
    assert voronoi_weights(pat, w).sum() == pytest.approx(w.area, rel=1e-6)


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def test_distance_zero_at_source():
    assert distance_to_source(np.array([[1.0, 2.0]]), (1.0, 2.0))[0] == 0.0


def test_distance_pythagoras():
    assert distance_to_source(np.array([[3.0, 4.0]]), (0.0, 0.0))[0] == pytest.approx(5.0)
