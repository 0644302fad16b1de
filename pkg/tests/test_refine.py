import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from facetmvs.geometry import CameraRig, Image, PointSample, look_at, make_camera
from facetmvs.mesh import SurfaceMesh, icosphere
from facetmvs.pairs import PairAssignment
from facetmvs.refine import (CLASSIC, RefineConfig, classic_items, facetwise_items, photometric_energy,
                             photometric_gradient, refine_loop, render_events, umbrella)
from facetmvs.render import pixel_centers


def plane_texture(X):
    return 0.5 + 0.25 * np.sin(3 * X[..., 0] + X[..., 1]) * np.cos(2 * X[..., 1] - 0.5 * X[..., 0])


def plane_scene(n=9, scale=2):
    """Grid mesh of the plane z = 0 seen by two cameras rendering its analytic texture."""
    K = np.array([[90.0 * scale, 0, 48 * scale], [0, 90.0 * scale, 40 * scale], [0, 0, 1]])
    cams = [make_camera(K, look_at(e, (0, 0, 0), up=(0, 1, 0)), e, (96 * scale, 80 * scale), id=k)
            for k, e in enumerate([(0.3, -0.2, 3.0), (1.2, 0.4, 2.6)])]
    imgs = []
    for c in cams:
        r = c.pixel_rays(pixel_centers(*c.image_size))
        lam = -c.center[2] / r[..., 2]
        imgs.append(Image(plane_texture(c.center + lam[..., None] * r)))
    g = np.linspace(-2, 2, n)
    xx, yy = np.meshgrid(g, g)
    V = np.c_[xx.ravel(), yy.ravel(), np.zeros(n * n)]
    F = []
    for r in range(n - 1):
        for c in range(n - 1):
            a, b, cc, d = r * n + c, r * n + c + 1, (r + 1) * n + c, (r + 1) * n + c + 1
            F += [(a, b, d), (a, d, cc)]
    return SurfaceMesh(V, np.array(F)), CameraRig(cams, imgs)


def lift(mesh, sigma, seed=0):
    dz = np.random.default_rng(seed).normal(0, sigma, mesh.n_vertices)
    return mesh.with_vertices(mesh.vertices + np.c_[np.zeros((mesh.n_vertices, 2)), dz])


def test_config_validation():
    for bad in (dict(iterations=-1), dict(step_size=0.0), dict(smooth_weight=1.5), dict(mode="other"),
                dict(classic_k=0), dict(window=4), dict(image_gradient="sobel")):
        with pytest.raises(ValueError):
            RefineConfig(**bad)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_umbrella_is_translation_invariant(x, y, z):
    m = icosphere(1)
    shifted = m.with_vertices(m.vertices + np.array([x, y, z]))
    assert np.allclose(umbrella(m), umbrella(shifted), atol=1e-12)


def test_umbrella_vanishes_inside_a_flat_regular_grid_and_shrinks_a_sphere():
    mesh, _ = plane_scene()
    U = umbrella(mesh)
    n = 9
    interior = [r * n + c for r in range(1, n - 1) for c in range(1, n - 1)]
    # the diagonal split makes the 1-ring symmetric about the vertex
    assert np.allclose(U[interior], 0, atol=1e-12)
    s = icosphere(2)
    assert np.all(np.einsum("ij,ij->i", umbrella(s), s.vertices) < 0)


def test_gradient_at_truth_is_below_the_noise_floor():
    mesh, rig = plane_scene()
    g_true = np.linalg.norm(photometric_gradient(mesh, rig, (0, 1)))
    g_pert = np.linalg.norm(photometric_gradient(lift(mesh, 0.05), rig, (0, 1)))
    assert g_true <= 0.01 * g_pert


def test_gradient_only_moves_vertices_of_the_subset():
    mesh, rig = plane_scene(scale=1)
    noisy = lift(mesh, 0.02)
    subset = list(range(20, 40))
    g = photometric_gradient(noisy, rig, (0, 1), subset=subset)
    touched = np.zeros(mesh.n_vertices, bool)
    touched[np.unique(mesh.faces[subset])] = True
    assert np.all(g[~touched] == 0) and np.any(g[touched] != 0)
    assert np.all(photometric_gradient(noisy, rig, (0, 1), subset=[]) == 0)


def test_refinement_flattens_a_lifted_plane():
    mesh, rig = plane_scene(scale=1)
    noisy = lift(mesh, 0.03)
    items = [((0, 1), None), ((1, 0), None)]
    cfg = RefineConfig(iterations=15, smooth_weight=0.1)
    res = refine_loop(noisy, rig, cfg, items)
    assert np.array_equal(res.mesh.faces, noisy.faces)
    assert len(res.energy) == cfg.iterations + 1
    assert res.energy[-1] < res.energy[0]
    before = np.abs(noisy.vertices[:, 2]).mean()
    after = np.abs(res.mesh.vertices[:, 2]).mean()
    assert after < 0.7 * before
    assert np.isclose(photometric_energy(res.mesh, rig, items, cfg), res.energy[-1])


def test_workers_do_not_change_the_result():
    mesh, rig = plane_scene(scale=1)
    noisy = lift(mesh, 0.03)
    items = [((0, 1), list(range(0, 64))), ((1, 0), list(range(0, 64))), ((0, 1), list(range(64, 128)))]
    a = refine_loop(noisy, rig, RefineConfig(iterations=3, workers=1), items)
    b = refine_loop(noisy, rig, RefineConfig(iterations=3, workers=3), items)
    assert np.array_equal(a.mesh.vertices, b.mesh.vertices) and a.energy == b.energy


def test_zero_iterations_returns_the_input():
    mesh, rig = plane_scene(scale=1)
    res = refine_loop(mesh, rig, RefineConfig(iterations=0), [((0, 1), None)])
    assert np.array_equal(res.mesh.vertices, mesh.vertices) and res.energy == []


def assignment(labels, candidates, empty=None):
    labels = np.asarray(labels)
    return PairAssignment(candidates, labels, 0.0, [], np.zeros(len(labels), bool) if empty is None else empty)


def test_facetwise_items_and_render_events():
    mesh = icosphere(1)
    F = mesh.n_faces
    labels = np.arange(F) % 3
    empty = np.zeros(F, bool)
    empty[0] = True
    a = assignment(labels, [(0, 1), (0, 2), (1, 2)], empty)
    items = facetwise_items(a)
    assert len(items) == 6
    assert [p for p, _ in items[:2]] == [(0, 1), (1, 0)]
    # the empty facet is left to smoothing
    assert all(0 not in fs for _, fs in items)
    # both directions of a pair render the same facets once
    assert render_events(mesh, items) == F - 1
    assert render_events(mesh, facetwise_items(a, symmetric=False)) == F - 1
    classic = [((0, 1), None), ((1, 0), None), ((2, 0), None)]
    assert render_events(mesh, classic) == 3 * F


def test_classic_items_pair_each_camera_with_its_best_partners():
    samples = ([PointSample((0.0, 0.0, 0.0), {0, 1})] * 5 + [PointSample((0.0, 0.0, 0.0), {0, 2})] * 3
               + [PointSample((0.0, 0.0, 0.0), {1, 2})])
    items = classic_items(samples, [0, 1, 2], k=1)
    assert items == [((0, 1), None), ((1, 0), None), ((2, 0), None)]
    assert len(classic_items(samples, [0, 1, 2], k=2)) == 6
    assert RefineConfig(mode=CLASSIC).mode == "classic"
