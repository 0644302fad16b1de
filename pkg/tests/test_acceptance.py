"""Acceptance criteria, one test each, at the stated tolerances.

Each test records a one-line PASS/FAIL summary that the terminal summary
prints at the end of the run (see conftest.py). Run only these with
``pytest tests/test_acceptance.py -v``.
"""
import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from facetmvs import fileio
from facetmvs.delaunay import INF, Tetrahedralization
from facetmvs.geometry import insphere, look_at, make_camera, orient3d
from facetmvs.graphcut import FlowGraph, VisParams, cut_value, min_cut, solve_folded, visibility_graph
from facetmvs.manifold import cleanup
from facetmvs.mesh import SurfaceMesh, is_manifold
from facetmvs.metrics import accuracy
from facetmvs.pairs import Potts, build_candidates, facet_visibility, icm, select_pairs, unary_table
from facetmvs.pipeline import PipelineError, RunConfig, run_pipeline, write_outputs
from facetmvs.refine import (RefineConfig, classic_items, facetwise_items, photometric_energy,
                             photometric_gradient, refine_loop)
from facetmvs.render import bilinear, depth_points, pixel_centers, rasterize, reproject
from facetmvs.render import zncc_window, zncc_window_grad
from facetmvs.synthetic import generate_synthetic, refinement_fixture


def record(n, ok, text):
    ACCEPTANCE_LINES[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {text}"
    print(ACCEPTANCE_LINES[n])


# ------------------------------------------------------------------ 1

def test_01_singular_vertex_reduction():
    """>= 200 randomized min-cut labelings; cleanup removes >= 80% on average."""
    t0 = time.perf_counter()
    shapes = ["sphere", "cube", "wavy-plane"]
    per_scene, ratios = [], []
    for s in range(10):
        rng = np.random.default_rng(s)
        n = int(rng.integers(300, 1001))
        b = generate_synthetic(shapes[s % 3], n_cameras=8, image_size=(32, 32), n_points=n, seed=s,
                               position_noise=0.01)
        t = Tetrahedralization.build(b.points, seed=s)
        g = visibility_graph(t, {c.id: c for c in b.cameras}, b.samples, VisParams(),
                             sample_vertices=t.input_to_vertex)
        before = after = 0
        for _ in range(20):
            # the graph is built once per scene; each labeling perturbs its capacities
            gg = g.copy()
            gg.face_cap *= rng.lognormal(0.0, 1.0, size=gg.face_cap.shape)
            gg.sink_cap *= rng.lognormal(0.0, 1.0, size=gg.sink_cap.shape)
            tt = t.copy()
            min_cut(gg, tt)
            rep = cleanup(tt)
            before += rep.before
            after += rep.after
            if rep.before:
                ratios.append(1.0 - rep.after / rep.before)
        per_scene.append((shapes[s % 3], n, before, after))
    elapsed = time.perf_counter() - t0
    mean = float(np.mean(ratios))
    for shape, n, before, after in per_scene:
        print(f"  {shape:10s} n={n:4d} singular {before:5d} -> {after:3d}")
    ok = len(ratios) >= 1 and mean >= 0.80 and elapsed <= 300
    record(1, ok, f"mean singular-vertex reduction {mean:.1%} over {len(ratios)} labelings with "
                  f"singular vertices (200 run; quartiles {np.percentile(ratios, 25):.1%}/"
                  f"{np.percentile(ratios, 50):.1%}/{np.percentile(ratios, 75):.1%}), {elapsed:.0f} s")
    assert ok


# ------------------------------------------------------------------ 2

def test_02_manifold_gate(monkeypatch):
    """Every pipeline run ends manifold; a broken repair is a hard failure."""
    runs = [("sphere", 0.0, True), ("sphere", 0.01, True), ("cube", 0.01, True),
            ("wavy-plane", 0.01, True), ("sphere", 0.02, False), ("cube", 0.0, False)]
    passed = 0
    for k, (shape, noise, clean) in enumerate(runs):
        b = generate_synthetic(shape, n_cameras=6, image_size=(48, 48), n_points=400, seed=20 + k,
                               position_noise=noise)
        cfg = RunConfig(seed=k, cleanup=clean, refine=RefineConfig(iterations=3), eval_samples=2000)
        res = run_pipeline(b, cfg)
        passed += is_manifold(res.mesh) and is_manifold(res.initial_mesh)

    # without the fallback an uncleaned scene with singular vertices must stop the run
    import facetmvs.pipeline as pl
    monkeypatch.setattr(pl, "vertex_split_fallback", lambda m: m)
    raised = False
    for seed in range(40, 60):
        b = generate_synthetic("sphere", n_cameras=6, image_size=(32, 32), n_points=600, seed=seed,
                               position_noise=0.02)
        try:
            run_pipeline(b, RunConfig(cleanup=False, refine=RefineConfig(iterations=0)))
        except PipelineError as e:
            raised = e.stage == "fallback"
            break
    ok = passed == len(runs) and raised
    record(2, ok, f"{passed}/{len(runs)} pipeline runs manifold; broken repair raises: {raised}")
    assert ok


# ------------------------------------------------------------------ 3

def _exhaustive_cut(arcs, src, snk):
    n = len(src)
    labels = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(bool)
    best = math.inf
    for free in labels:
        best = min(best, cut_value(free, arcs, src, snk))
    return best


def test_03_min_cut_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    graphs = 0
    # graphs over small Delaunay complexes, folded exactly as the pipeline folds them
    while graphs < 250:
        t = Tetrahedralization.build(rng.random((int(rng.integers(5, 8)), 3)), seed=graphs)
        if not 1 <= len(t.finite_cells()) <= 12:
            continue
        g = FlowGraph(t)
        g.face_cap[:] = rng.integers(0, 20, size=g.face_cap.shape)
        g.source_cap[:] = rng.integers(0, 20, size=g.n_cells) * (rng.random(g.n_cells) < 0.3)
        g.sink_cap[:] = rng.integers(0, 20, size=g.n_cells) * (rng.random(g.n_cells) < 0.3)
        _, arcs, src, snk = g.folded()
        _, value = min_cut(g)
        mismatches += value != _exhaustive_cut(arcs, src, snk)
        graphs += 1
    # arbitrary node graphs with up to 12 nodes
    for _ in range(250):
        n = int(rng.integers(1, 13))
        arcs = [(u, v, float(rng.integers(0, 20)), float(rng.integers(0, 20)))
                for u in range(n) for v in range(u + 1, n) if rng.random() < 0.4]
        src = rng.integers(0, 30, size=n) * (rng.random(n) < 0.4)
        snk = rng.integers(0, 30, size=n) * (rng.random(n) < 0.4)
        _, value = solve_folded(arcs, src.astype(float), snk.astype(float))
        mismatches += value != _exhaustive_cut(arcs, src, snk)
        graphs += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed <= 60
    record(3, ok, f"{graphs - mismatches}/{graphs} cut values equal exhaustive enumeration, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 4

def _brute_force_violations(t):
    pts = t.points
    bad = 0
    for c in t.finite_cells():
        a, b, cc, d = (tuple(pts[v]) for v in t.cells[c])
        o = orient3d(a, b, cc, d)
        for v in range(len(pts)):
            if v not in t.cells[c] and insphere(a, b, cc, d, tuple(pts[v]), orientation=o) > 0:
                bad += 1
    for c in t.infinite_cells():
        facet = [v for v in t.cells[c] if v != INF]
        nb = t.neighbors[c][t.cells[c].index(INF)]
        inner = [v for v in t.cells[nb] if v not in facet][0]
        a, b, cc = (tuple(pts[v]) for v in facet)
        ref = orient3d(a, b, cc, tuple(pts[inner]))
        bad += sum(orient3d(a, b, cc, tuple(p)) == -ref for p in pts)
    return bad


def test_04_delaunay_correctness():
    rng = np.random.default_rng(4)
    builds = []
    for k in range(20):
        builds.append(rng.random((50, 3)))
    # degenerate configurations: lattice, cospherical, coplanar clusters
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    builds.append(g[rng.choice(len(g), 50, replace=False)])
    s = rng.normal(size=(50, 3))
    builds.append(s / np.linalg.norm(s, axis=1, keepdims=True))
    p = rng.random((50, 3))
    p[:25, 2] = 0.5
    builds.append(p)
    total = 0
    for k, pts in enumerate(builds):
        t = Tetrahedralization.build(pts, seed=k)
        t.check_adjacency()
        total += _brute_force_violations(t)
    ok = total == 0
    record(4, ok, f"{total} empty-circumsphere violations over {len(builds)} 50-point builds "
                  f"(exact brute force, incl. lattice/cospherical/coplanar)")
    assert ok


# ------------------------------------------------------------------ 5

def _bipyramid(k):
    top, bot = k, k + 1
    return np.array([(i, (i + 1) % k, top) for i in range(k)] + [((i + 1) % k, i, bot) for i in range(k)])


POLYHEDRA = [np.array([(0, 1, 2), (0, 3, 1), (1, 3, 2), (2, 3, 0)]), _bipyramid(3), _bipyramid(4),
             _bipyramid(5)]


def _exhaustive_mrf(cost, edges, pc):
    F, L = cost.shape
    allL = np.array(list(itertools.product(range(L), repeat=F)))
    E = cost[np.arange(F), allL].sum(1)
    for a, b in edges:
        E += np.where(allL[:, a] == allL[:, b], pc[0], pc[1])
    return float(E.min())


def _mrf_instances(rng, n, geometric):
    """Closed facet meshes with <= 10 facets and <= 3 candidate labels."""
    for _ in range(n):
        faces = POLYHEDRA[int(rng.integers(len(POLYHEDRA)))]
        nv = int(faces.max()) + 1
        V = rng.normal(size=(nv, 3))
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        mesh = SurfaceMesh(V, faces)
        L = int(rng.integers(2, 4))
        if geometric:
            # vertex seen by the cameras it faces; unaries from the pipeline's ratio table
            ncam = int(rng.integers(3, 6))
            C = rng.normal(size=(ncam, 3))
            vis = [frozenset(np.flatnonzero(C @ V[v] > 0).tolist()) for v in range(nv)]
            allp = [(a, b) for a in range(ncam) for b in range(a + 1, ncam)]
            cands = [allp[i] for i in sorted(rng.choice(len(allp), L, replace=False))]
            phi, _ = unary_table(facet_visibility(mesh, vis), cands)
        else:
            phi = rng.random((len(faces), L))
            phi /= phi.sum(1, keepdims=True)
        yield -np.log(phi), mesh.face_adjacency()


def test_05_mrf_optimality():
    p = Potts()
    pc = (-math.log(p.same), -math.log(p.diff))
    rates = {}
    bounds_ok = True
    for geometric in (True, False):
        hits = 0
        for cost, edges in _mrf_instances(np.random.default_rng(5), 100, geometric):
            _, e, trace = icm(cost, edges, pc)
            opt = _exhaustive_mrf(cost, edges, pc)
            tol = 1e-9 * max(1.0, abs(opt))
            bounds_ok &= e >= opt - tol and e <= trace[0] + tol
            bounds_ok &= all(b <= a + tol for a, b in zip(trace, trace[1:]))
            hits += abs(e - opt) <= tol
        rates[geometric] = hits / 100
    ok = bounds_ok and rates[True] >= 0.60
    record(5, ok, f"ICM optimum rate {rates[True]:.0%} on visibility-derived instances "
                  f"(i.i.d. random unaries: {rates[False]:.0%}); optimum <= ICM <= init on all: {bounds_ok}")
    assert ok


# ------------------------------------------------------------------ 6

def test_06_gradient_validity():
    fx = refinement_fixture("sphere", texture_scale=0.25)
    rig = fx.bundle.rig
    mesh = fx.truth
    cfg = RefineConfig()
    vn = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    delta = 1e-3 * mesh.bbox_diagonal()
    rng = np.random.default_rng(6)
    agree = total = 0
    for pair in [(0, 1), (2, 3), (5, 4)]:
        g = photometric_gradient(mesh, rig, pair, None, cfg)
        gn = np.einsum("ij,ij->i", g, vn)

        def facing(c):
            d = rig[c][0].center - mesh.vertices
            return np.einsum("ij,ij->i", d / np.linalg.norm(d, axis=1, keepdims=True), vn)

        # vertices squarely in view of both cameras: no silhouette or occlusion event
        # lies within the finite-difference step
        cand = np.flatnonzero((facing(pair[0]) > 0.5) & (facing(pair[1]) > 0.5) & (gn != 0))
        for v in rng.choice(cand, 20, replace=False):
            E = []
            for s in (1.0, -1.0):
                V = mesh.vertices.copy()
                V[v] += s * delta * vn[v]
                E.append(photometric_energy(mesh.with_vertices(V), rig, [(pair, None)], cfg))
            fd = (E[0] - E[1]) / (2 * delta)
            agree += abs(gn[v] - fd) <= 0.2 * abs(fd)
            total += 1
    rate = agree / total

    worst = 0.0
    for _ in range(1000):
        n = int(rng.choice([9, 25, 49]))
        Iw, Rw = rng.random(n), rng.random(n)
        an = zncc_window_grad(Iw, Rw)
        h = 1e-6
        fd = np.empty(n)
        for k in range(n):
            Rp, Rm = Rw.copy(), Rw.copy()
            Rp[k] += h
            Rm[k] -= h
            fd[k] = (zncc_window(Iw, Rp) - zncc_window(Iw, Rm)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(an - fd))))
    ok = rate >= 0.90 and worst <= 1e-6
    record(6, ok, f"{rate:.0%} of {total} vertices within 20% of central differences "
                  f"(|delta| = 1e-3 bbox); ZNCC kernel max |error| {worst:.1e} on 1000 windows")
    assert ok


# ------------------------------------------------------------- 7 and 8

@pytest.fixture(scope="module")
def sphere_fixture():
    return refinement_fixture("sphere")


@pytest.fixture(scope="module")
def wavy_fixture():
    return refinement_fixture("wavy-plane")


def _run_mode(fx, mode):
    b = fx.bundle
    if mode == "facetwise":
        cands = build_candidates(b.samples, len(b.cameras))
        a = select_pairs(fx.noisy, fx.vertex_visibility, cands, cameras=b.cameras)
        items = facetwise_items(a)
    else:
        items = classic_items(b.samples, b.rig.ids, 2)
    t0 = time.perf_counter()
    res = refine_loop(fx.noisy, b.rig, RefineConfig(mode=mode, iterations=30), items)
    return res, time.perf_counter() - t0, items


_RUNS: dict = {}


def _cached(fx, mode):
    key = (fx.shape.name, mode)
    if key not in _RUNS:
        _RUNS[key] = _run_mode(fx, mode)
    return _RUNS[key]


def test_07_refinement_improves(sphere_fixture):
    fx = sphere_fixture
    res, elapsed, _ = _cached(fx, "facetwise")
    a0 = accuracy(fx.noisy, fx.shape)
    a1 = accuracy(res.mesh, fx.shape)
    gain = 1.0 - a1 / a0
    E = res.energy
    monotone = all(b < a for a, b in zip(E[:10], E[1:11]))
    ok = gain >= 0.30 and E[10] < E[0] and elapsed <= 600
    record(7, ok, f"sphere accuracy {a0:.5f} -> {a1:.5f} ({gain:.0%} better); energy "
                  f"{E[0]:.0f} -> {E[10]:.0f} after 10 iterations (strictly decreasing: {monotone}), "
                  f"{elapsed:.0f} s")
    assert ok


def test_08_facetwise_vs_classic(sphere_fixture, wavy_fixture):
    lines = []
    ok = True
    for fx in (sphere_fixture, wavy_fixture):
        fw, _, _ = _cached(fx, "facetwise")
        cl, _, items = _cached(fx, "classic")
        a_fw = accuracy(fw.mesh, fx.shape)
        a_cl = accuracy(cl.mesh, fx.shape)
        F = fx.noisy.n_faces
        N = len(fx.bundle.cameras)
        K = 2
        fw_events = max(fw.render_events)
        cl_events = min(cl.render_events)
        this = a_fw <= 1.05 * a_cl and fw_events <= F and cl_events == len(items) * F
        ok &= this
        lines.append(f"{fx.shape.name} {a_fw:.5f} vs {a_cl:.5f}, events/iter {fw_events} <= F={F} "
                     f"vs {cl_events} = {len(items)}x F (N*K = {N * K})")
    record(8, ok, "facetwise vs classic accuracy: " + "; ".join(lines))
    assert ok


# ------------------------------------------------------------------ 9

def _plane_texture(X):
    return 0.5 + 0.2 * X[..., 0] - 0.1 * X[..., 1] + 0.05 * np.sin(0.8 * X[..., 0] + 0.3 * X[..., 1])


def _plane_image(cam):
    W, H = cam.image_size
    rays = cam.pixel_rays(pixel_centers(W, H))
    lam = -cam.center[2] / rays[..., 2]
    return _plane_texture(cam.center + lam[..., None] * rays)


def _homography(ci, cj):
    """Map of camera-i pixels to camera-j pixels induced by the plane z = 0."""
    n = np.array([0.0, 0.0, 1.0])
    d0 = 0.0
    Ki, Kj = ci.intrinsics, cj.intrinsics
    M = np.eye(3) + np.outer(ci.center - cj.center, n) / (d0 - n @ ci.center)
    return Kj @ cj.rotation @ M @ ci.rotation.T @ np.linalg.inv(Ki)


def test_09_reprojection_correctness():
    K = np.array([[90.0, 0, 48], [0, 90.0, 40], [0, 0, 1]])
    cams = []
    for k, eye in enumerate([(0.3, -0.2, 3.0), (1.2, 0.4, 2.6)]):
        cams.append(make_camera(K, look_at(eye, (0.0, 0.0, 0.0), up=(0, 1, 0)), eye, (96, 80), id=k))
    g = np.linspace(-3, 3, 7)
    xx, yy = np.meshgrid(g, g)
    V = np.c_[xx.ravel(), yy.ravel(), np.zeros(xx.size)]
    faces = []
    for r in range(6):
        for c in range(6):
            a, b, cc, d = r * 7 + c, r * 7 + c + 1, (r + 1) * 7 + c, (r + 1) * 7 + c + 1
            faces += [(a, b, d), (a, d, cc)]
    plane = SurfaceMesh(V, np.array(faces))
    ci, cj = cams
    img_j = _plane_image(cj)
    dm_i, dm_j = rasterize(ci, plane), rasterize(cj, plane)
    rep = reproject(ci, cj, img_j, dm_i, dm_j, plane, 1e-3 * plane.bbox_diagonal())
    Hm = _homography(ci, cj)
    W, Hh = ci.image_size
    x = np.concatenate([pixel_centers(W, Hh), np.ones((Hh, W, 1))], -1) @ Hm.T
    u, v = x[..., 0] / x[..., 2], x[..., 1] / x[..., 2]
    inside = (u >= 0.5) & (u <= cj.width - 0.5) & (v >= 0.5) & (v <= cj.height - 0.5)
    m = rep.mask & inside
    homography = bilinear(img_j, u[m], v[m])
    diff_h = float(np.mean(np.abs(rep.values[m] - homography)))
    # the plane texture itself, independent of any resampling
    Xi = depth_points(ci, dm_i)
    diff_t = float(np.mean(np.abs(rep.values[m] - _plane_texture(Xi[m]))))
    coverage = float(m.sum()) / float(inside.sum())

    # rasterizer against Moller-Trumbore ray casting at every pixel center
    from facetmvs.mesh import icosphere
    worst, mismatch = 0.0, 0
    fx = generate_synthetic("sphere", n_cameras=4, image_size=(96, 96), n_points=50, seed=9)
    for mesh in (icosphere(3), plane):
        for cam in fx.cameras + cams:
            dm = rasterize(cam, mesh)
            rays = cam.pixel_rays(pixel_centers(*cam.image_size)).reshape(-1, 3)
            best = np.full(len(rays), np.inf)
            Vm, Fm = mesh.vertices, mesh.faces
            for f in range(len(Fm)):
                p0, p1, p2 = Vm[Fm[f]]
                e1, e2 = p1 - p0, p2 - p0
                h = np.cross(rays, e2)
                a = h @ e1
                with np.errstate(divide="ignore", invalid="ignore"):
                    s = cam.center - p0
                    uu = (h @ s) / a
                    q = np.cross(s, e1)
                    vv = (rays @ q) / a
                    tt = (e2 @ q) / a
                hit = (uu >= 0) & (vv >= 0) & (uu + vv <= 1) & (tt > 0)
                best = np.where(hit & (tt < best), tt, best)
            best = best.reshape(dm.depth.shape)
            both = np.isfinite(best) & dm.covered
            mismatch += int((np.isfinite(best) != dm.covered).sum())
            if both.any():
                worst = max(worst, float(np.max(np.abs(best[both] - dm.depth[both]))))
    ok = diff_h < 1e-3 and diff_t < 1e-3 and coverage > 0.99 and worst <= 1e-6 and mismatch == 0
    record(9, ok, f"plane reprojection vs homography mean |diff| {diff_h:.1e}, vs analytic texture "
                  f"{diff_t:.1e} ({coverage:.1%} of overlap kept); rasterizer vs ray casting max depth "
                  f"error {worst:.1e}, {mismatch} coverage mismatches")
    assert ok


# ----------------------------------------------------------------- 10

def test_10_determinism(tmp_path):
    b = generate_synthetic("sphere", n_cameras=6, image_size=(64, 64), n_points=400, seed=10,
                           position_noise=0.005)
    outs = []
    for k, workers in enumerate([1, 1, 2, 3]):
        cfg = RunConfig(seed=7, workers=workers, refine=RefineConfig(iterations=5), eval_samples=5000)
        write_outputs(tmp_path / f"run{k}", run_pipeline(b, cfg))
        outs.append(tmp_path / f"run{k}")
    names = sorted(p.name for p in outs[0].iterdir() if p.name != "timing.csv")
    same = all((outs[0] / n).read_bytes() == (o / n).read_bytes() for o in outs[1:] for n in names)
    ok = same and "mesh.ply" in names and "metrics.csv" in names
    record(10, ok, f"{len(names)} PLY/CSV outputs bitwise identical across 4 runs "
                   f"(workers 1, 1, 2, 3): {same}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
