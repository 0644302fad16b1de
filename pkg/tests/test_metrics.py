import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from facetmvs.mesh import SurfaceMesh, icosphere
from facetmvs.metrics import (MeshDistance, accuracy, closest_point_on_triangles, completeness, evaluate,
                              sample_surface)
from facetmvs.synthetic import Sphere


def brute_closest(p, a, b, c, n=200):
    """Densest barycentric grid search; accurate to about the grid spacing."""
    s, t = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    keep = s + t <= 1
    Q = a + np.outer(s[keep], b - a) + np.outer(t[keep], c - a)
    return Q[np.argmin(np.linalg.norm(Q - p, axis=1))]


def exact_closest(p, a, b, c):
    """Closest point by projecting onto the plane, then onto the three edges."""
    n = np.cross(b - a, c - a)
    q = p - ((p - a) @ n) / (n @ n) * n
    M = np.array([b - a, c - a]).T
    w = np.linalg.lstsq(M, q - a, rcond=None)[0]
    if w[0] >= 0 and w[1] >= 0 and w.sum() <= 1:
        return q
    best, bd = None, np.inf
    for u, v in ((a, b), (b, c), (c, a)):
        t = np.clip((p - u) @ (v - u) / ((v - u) @ (v - u)), 0, 1)
        x = u + t * (v - u)
        if np.linalg.norm(p - x) < bd:
            best, bd = x, np.linalg.norm(p - x)
    return best


coords = st.floats(-3, 3, allow_nan=False)
pt = st.tuples(coords, coords, coords).map(np.array)


@given(pt, pt, pt, pt)
def test_closest_point_matches_projection_oracle(p, a, b, c):
    if np.linalg.norm(np.cross(b - a, c - a)) < 1e-3:
        return
    q = closest_point_on_triangles(p[None], a[None], b[None], c[None])[0]
    assert np.linalg.norm(p - q) <= np.linalg.norm(p - exact_closest(p, a, b, c)) + 1e-9
    assert np.isclose(np.linalg.norm(p - q), np.linalg.norm(p - exact_closest(p, a, b, c)), atol=1e-9)


def test_closest_point_against_grid_search(rng):
    for _ in range(20):
        a, b, c, p = rng.normal(size=(4, 3))
        q = closest_point_on_triangles(p[None], a[None], b[None], c[None])[0]
        g = brute_closest(p, a, b, c)
        assert np.linalg.norm(p - q) <= np.linalg.norm(p - g) + 1e-12
        assert np.linalg.norm(p - q) >= np.linalg.norm(p - g) - 0.02


def test_mesh_distance_equals_brute_force(rng):
    mesh = icosphere(2)
    P = rng.normal(size=(300, 3)) * 1.5
    d = MeshDistance(mesh, k=4)(P)
    V, F = mesh.vertices, mesh.faces
    brute = np.array([np.linalg.norm(p - closest_point_on_triangles(np.repeat(p[None], len(F), 0), V[F[:, 0]],
                                                                    V[F[:, 1]], V[F[:, 2]]), axis=1).min()
                      for p in P])
    assert np.allclose(d, brute, atol=1e-12)


def test_identical_meshes_score_zero():
    m = icosphere(2)
    s = evaluate(m, m, n=2000)
    assert s.accuracy <= 1e-9 and s.completeness <= 1e-9


def test_unit_sphere_against_radius_1_1():
    m = icosphere(5)
    acc = accuracy(m, Sphere(radius=1.1), n=5000)
    assert abs(acc - 0.1) <= 0.002


@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
def test_translation_bounds_accuracy(x, y, z):
    t = np.array([x, y, z])
    if np.linalg.norm(t) < 1e-3:
        return
    m = icosphere(1)
    moved = m.with_vertices(m.vertices + t)
    acc = accuracy(moved, m, n=500)
    assert 0 < acc <= np.linalg.norm(t) + 1e-12
    assert 0 < completeness(moved, m, n=500) <= np.linalg.norm(t) + 1e-12


def test_area_sampling_is_uniform():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 3], [1, 0, 3], [0, 3, 3]], float)
    m = SurfaceMesh(V, np.array([[0, 1, 2], [3, 4, 5]]))
    P = sample_surface(m, 20000, seed=1)
    # the second triangle has three times the area
    frac = np.mean(P[:, 2] > 1.5)
    assert abs(frac - 0.75) < 0.02


def test_empty_mesh_is_rejected():
    with pytest.raises(ValueError):
        evaluate(SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), icosphere(1))
