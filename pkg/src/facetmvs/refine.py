"""Photometric mesh refinement by gradient descent.

For a camera pair (i, j) the image of camera j is warped into camera i
through the current mesh and compared with image i by windowed ZNCC. The
per-pixel derivative of the error is chained through the warp and spread
to facet vertices with barycentric weights, along the facet normal. In
facetwise mode each facet is driven by its assigned pair only; in classic
mode every pair sees the whole mesh.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix

from .geometry import Camera, CameraRig
from .mesh import SurfaceMesh
from .pairs import PairAssignment, canonical, covisibility, facet_groups
from .render import (bilinear, bilinear_grad, depth_points, image_gradient, occlusion_mask, rasterize,
                     reproject, zncc_error_grad)

log = logging.getLogger(__name__)

FACETWISE = "facetwise"
CLASSIC = "classic"
GRAZING_EPS = 1e-9


class RefineError(RuntimeError):
    pass


@dataclass
class RefineConfig:
    iterations: int = 30
    step_size: float | None = None
    smooth_weight: float = 0.3
    mode: str = FACETWISE
    classic_k: int = 2
    window: int = 5
    occlusion_mult: float = 10.0
    occlusion_tol_frac: float = 1e-3
    max_motion_frac: float = 0.05
    # the umbrella post-step moves vertices by smooth_weight * smooth_damping
    # of their offset to the 1-ring mean
    smooth_damping: float = 0.05
    # gradient-norm quantile that the step calibration maps to max motion
    step_quantile: float = 0.8
    # facetwise pairs warp both ways (i into j and j into i) on their facets
    symmetric: bool = True
    # retries with half the step when an update raises the energy
    backtracks: int = 0
    step_growth: float = 1.25
    # divide each vertex gradient by its pixel support (barycentric weight sum)
    normalize: bool = False
    # "central": central-difference image gradient sampled bilinearly;
    # "bilinear": exact derivative of the bilinear sampler
    image_gradient: str = "central"
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0.0 <= self.smooth_weight <= 1.0:
            raise ValueError("smooth_weight must lie in [0, 1]")
        if not 0.0 <= self.smooth_damping <= 1.0:
            raise ValueError("smooth_damping must lie in [0, 1]")
        if not 0.0 < self.max_motion_frac <= 0.5:
            raise ValueError("max_motion_frac must lie in (0, 0.5]")
        if self.mode not in (FACETWISE, CLASSIC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.classic_k < 1:
            raise ValueError("classic_k must be at least 1")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and at least 3")
        if self.image_gradient not in ("central", "bilinear"):
            raise ValueError(f"unknown image_gradient {self.image_gradient!r}")


@dataclass
class PairTerm:
    energy: float
    grad: np.ndarray | None
    pixels: int
    grazing: int
    support: np.ndarray | None = None


@dataclass
class RefineResult:
    mesh: SurfaceMesh
    energy: list = field(default_factory=list)
    render_events: list = field(default_factory=list)
    grazing: int = 0
    step_size: float = 0.0

    def trace_csv(self) -> str:
        lines = ["iteration,energy,render_events"]
        for k, e in enumerate(self.energy):
            ev = self.render_events[k] if k < len(self.render_events) else 0
            lines.append(f"{k},{e!r},{ev}")
        return "\n".join(lines) + "\n"


def projection_jacobian(cam: Camera, X: np.ndarray) -> np.ndarray:
    """d(u, v)/dX for world points ``X`` (n, 3) -> (n, 2, 3)."""
    y = cam.to_camera_frame(X)
    K = cam.intrinsics
    h = y @ K.T
    z = y[:, 2]
    u = h[:, 0] / h[:, 2]
    v = h[:, 1] / h[:, 2]
    J = np.empty((len(X), 2, 3))
    J[:, 0, :] = (K[0][None, :] - u[:, None] * np.array([0.0, 0.0, 1.0])) / z[:, None]
    J[:, 1, :] = (K[1][None, :] - v[:, None] * np.array([0.0, 0.0, 1.0])) / z[:, None]
    return J @ cam.rotation


def _barycentric_many(P0, P1, P2, X):
    e1, e2, r = P1 - P0, P2 - P0, X - P0
    n = np.cross(e1, e2)
    nn = np.einsum("ij,ij->i", n, n)
    w1 = np.einsum("ij,ij->i", np.cross(r, e2), n) / nn
    w2 = np.einsum("ij,ij->i", np.cross(e1, r), n) / nn
    return np.stack([1.0 - w1 - w2, w1, w2], axis=1)


class _Frame:
    """Per-iteration rendering state shared by all pairs."""

    def __init__(self, mesh: SurfaceMesh, rig: CameraRig, cfg: RefineConfig, cams):
        self.mesh = mesh
        self.rig = rig
        self.cfg = cfg
        self.normals = mesh.normals()
        self.tol = cfg.occlusion_tol_frac * mesh.bbox_diagonal()
        self.depth = {}
        self.occluded = {}
        for c in sorted(cams):
            cam, _ = rig[c]
            dm = rasterize(cam, mesh)
            self.depth[c] = dm
            self.occluded[c] = occlusion_mask(dm, cfg.occlusion_mult)


_GRADIENT_CACHE: dict = {}


def _image_gradient_cached(img):
    key = id(img)
    hit = _GRADIENT_CACHE.get(key)
    if hit is None or hit[0] is not img:
        hit = (img, image_gradient(img))
        _GRADIENT_CACHE[key] = hit
    return hit[1]


def pair_term(frame: _Frame, i: int, j: int, subset, want_grad: bool = True) -> PairTerm:
    """Energy and vertex gradient of one directed pair on a facet subset."""
    mesh = frame.mesh
    cfg = frame.cfg
    cam_i, img_i = frame.rig[i]
    cam_j, img_j = frame.rig[j]
    dm_i = frame.depth[i]
    nv = mesh.n_vertices
    active = np.zeros(mesh.n_faces, dtype=bool)
    if subset is None:
        active[:] = True
    else:
        active[np.asarray(subset, dtype=np.int64)] = True
    if not np.any(active):
        return PairTerm(0.0, np.zeros((nv, 3)) if want_grad else None, 0, 0)
    rep = reproject(cam_i, cam_j, img_j, dm_i, frame.depth[j], mesh, frame.tol)
    on = dm_i.covered & active[np.maximum(dm_i.facet, 0)]
    valid = rep.mask & ~frame.occluded[i]
    # windows may reach into neighboring facets; only errors centered on the subset count
    em, g = zncc_error_grad(img_i.values, rep.values, valid, cfg.window, centers=on)
    energy = float(em.error[em.valid].sum())
    if not want_grad:
        return PairTerm(energy, None, int((valid & on).sum()), 0)
    # pixels of facets outside the subset pass no gradient on
    sel = valid & on & (g != 0.0)
    rows, cols = np.nonzero(sel)
    grad = np.zeros((nv, 3))
    if len(rows) == 0:
        return PairTerm(energy, grad, int((valid & on).sum()), 0)
    f = dm_i.facet[rows, cols]
    X = depth_points(cam_i, dm_i)[rows, cols]
    d = cam_i.pixel_rays(np.stack([cols + 0.5, rows + 0.5], axis=1))
    n = frame.normals[f]
    nd = np.einsum("ij,ij->i", n, d)
    ok = np.abs(nd) >= GRAZING_EPS
    grazing = int((~ok).sum())
    f, X, d, n, nd = f[ok], X[ok], d[ok], n[ok], nd[ok]
    gq = g[rows[ok], cols[ok]]
    uv = rep.uv[rows[ok], cols[ok]]
    if cfg.image_gradient == "bilinear":
        grad_uv = bilinear_grad(img_j.values, uv[:, 0], uv[:, 1])
    else:
        gimg = _image_gradient_cached(img_j)
        grad_uv = np.stack([bilinear(gimg[..., 0], uv[:, 0], uv[:, 1]),
                            bilinear(gimg[..., 1], uv[:, 0], uv[:, 1])], axis=1)
    J = projection_jacobian(cam_j, X)
    # d(reprojected value) / d(normal offset of the surface at this pixel)
    dR = np.einsum("ik,ikl,il->i", grad_uv, J, d) / nd
    s = gq * dR
    tri = mesh.faces[f]
    V = mesh.vertices
    phi = _barycentric_many(V[tri[:, 0]], V[tri[:, 1]], V[tri[:, 2]], X)
    w = (s[:, None] * phi).ravel()
    idx = tri.ravel()
    nrep = np.repeat(n, 3, axis=0)
    for k in range(3):
        grad[:, k] = np.bincount(idx, weights=w * nrep[:, k], minlength=nv)
    support = np.bincount(idx, weights=phi.ravel(), minlength=nv)
    return PairTerm(energy, grad, int((valid & on).sum()), grazing, support)


def photometric_gradient(mesh: SurfaceMesh, rig: CameraRig, pair, subset=None,
                         cfg: RefineConfig | None = None) -> np.ndarray:
    """Vertex gradient of the pair's energy; ``pair = (i, j)`` warps j into i."""
    cfg = cfg or RefineConfig()
    if subset is not None and len(subset) == 0:
        return np.zeros((mesh.n_vertices, 3))
    i, j = pair
    frame = _Frame(mesh, rig, cfg, {i, j})
    return pair_term(frame, i, j, subset).grad


def photometric_energy(mesh: SurfaceMesh, rig: CameraRig, items, cfg: RefineConfig | None = None) -> float:
    """Sum of ZNCC errors over ``items`` = [((i, j), subset or None), ...]."""
    cfg = cfg or RefineConfig()
    cams = {c for (p, _) in items for c in p}
    frame = _Frame(mesh, rig, cfg, cams)
    return float(sum(pair_term(frame, p[0], p[1], s, want_grad=False).energy for p, s in items))


def umbrella(mesh: SurfaceMesh, vertices=None) -> np.ndarray:
    """Mean of the 1-ring minus the vertex; zero for isolated vertices."""
    V = mesh.vertices if vertices is None else np.asarray(vertices, float)
    e = mesh.edges()
    n = mesh.n_vertices
    if len(e) == 0:
        return np.zeros((n, 3))
    A = coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                   shape=(n, n)).tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    mean = A @ V
    out = np.zeros((n, 3))
    has = deg > 0
    out[has] = mean[has] / deg[has, None] - V[has]
    return out


def facetwise_items(assignment: PairAssignment, symmetric: bool = True):
    """Directed work items of a facet assignment: reference camera is the lower id.

    With ``symmetric`` each pair is also warped the other way on the same
    facets. Facets whose vertices no camera sees are left to smoothing.
    """
    items = []
    empty = assignment.empty if assignment.empty is not None else np.zeros(len(assignment.labels), bool)
    for pair, facets in facet_groups(assignment).items():
        fs = [f for f in facets if not empty[f]]
        if fs:
            items.append(((pair[0], pair[1]), fs))
            if symmetric:
                items.append(((pair[1], pair[0]), fs))
    return items


def classic_items(samples, cam_ids, k: int):
    """Every camera paired with its ``k`` best point-sharing partners, whole mesh each."""
    n = max(cam_ids) + 1
    C = covisibility(samples, n)
    items = []
    for i in sorted(cam_ids):
        order = sorted((j for j in cam_ids if j != i and C[i, j] > 0), key=lambda j: (-C[i, j], j))
        for j in order[:k]:
            items.append(((i, j), None))
    return items


def _evaluate(mesh, rig, cfg, items, want_grad, pool):
    cams = {c for (p, _) in items for c in p}
    frame = _Frame(mesh, rig, cfg, cams)
    jobs = [(p[0], p[1], s) for p, s in items]
    if pool is None:
        terms = [pair_term(frame, i, j, s, want_grad) for i, j, s in jobs]
    else:
        terms = list(pool.map(lambda a: pair_term(frame, a[0], a[1], a[2], want_grad), jobs))
    energy = 0.0
    grad = np.zeros((mesh.n_vertices, 3)) if want_grad else None
    support = np.zeros(mesh.n_vertices) if want_grad else None
    grazing = 0
    # fixed reduction order keeps results independent of the worker count
    for t in terms:
        energy += t.energy
        grazing += t.grazing
        if want_grad:
            grad += t.grad
            if t.support is not None:
                support += t.support
    if want_grad and cfg.normalize:
        pos = support[support > 0]
        if len(pos):
            grad = grad / np.maximum(support, 0.1 * float(np.median(pos)))[:, None]
    return energy, grad, grazing


def render_events(mesh: SurfaceMesh, items) -> int:
    """Facet activations per iteration for the given work items.

    A whole-mesh item is one reference view rendering every facet. Subset
    items activate their facets once per camera pair; the two directions of
    a symmetric pair share that activation.
    """
    total = 0
    active = {}
    for (i, j), s in items:
        if s is None:
            total += mesh.n_faces
        else:
            active.setdefault(canonical(i, j), set()).update(int(f) for f in s)
    return int(total + sum(len(v) for v in active.values()))


def refine_loop(mesh: SurfaceMesh, rig: CameraRig, cfg: RefineConfig, items,
                on_iteration=None) -> RefineResult:
    """Gradient descent with an umbrella post-step.

    ``items`` are directed work items ``((i, j), facets or None)`` built by
    :func:`facetwise_items` or :func:`classic_items`. The step size, unless
    given, is set at the first iteration so the largest vertex motion is
    ``max_motion_frac`` times the median edge length; motions are clipped
    to that bound in every iteration. With ``backtracks > 0`` an update that
    raises the photometric energy is retried with half the step (the last
    retry is kept regardless) and accepted steps grow by ``step_growth``.
    ``on_iteration(k, mesh)``, if given, is called after each update.
    """
    V = mesh.vertices.copy()
    res = RefineResult(mesh.copy())
    lengths = mesh.edge_lengths()
    max_motion = cfg.max_motion_frac * (float(np.median(lengths)) if len(lengths) else 0.0)
    step = cfg.step_size
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def update(V, grad, step):
        move = -step * grad
        norm = np.linalg.norm(move, axis=1)
        big = norm > max_motion
        move[big] *= (max_motion / norm[big])[:, None]
        W = V + move
        W = W + cfg.smooth_weight * cfg.smooth_damping * umbrella(mesh, W)
        if not np.all(np.isfinite(W)):
            bad = np.flatnonzero(~np.all(np.isfinite(W), axis=1))
            raise RefineError(f"non-finite vertex positions: {bad[:10].tolist()}")
        return W

    try:
        if cfg.iterations > 0:
            cur = mesh.with_vertices(V)
            energy, grad, grazing = _evaluate(cur, rig, cfg, items, True, pool)
            res.grazing += grazing
        for it in range(cfg.iterations):
            res.energy.append(energy)
            res.render_events.append(render_events(mesh, items))
            if step is None:
                gn = np.linalg.norm(grad, axis=1)
                gn = gn[gn > 0]
                gmax = float(np.quantile(gn, cfg.step_quantile)) if len(gn) else 0.0
                step = max_motion / gmax if gmax > 0 else 0.0
            for attempt in range(cfg.backtracks + 1):
                W = update(V, grad, step)
                e_new, g_new, grazing = _evaluate(mesh.with_vertices(W), rig, cfg, items, True, pool)
                res.grazing += grazing
                if e_new <= energy or attempt == cfg.backtracks:
                    break
                step *= 0.5
            if cfg.backtracks > 0 and e_new <= energy:
                step *= cfg.step_growth
            V, energy, grad = W, e_new, g_new
            if on_iteration is not None:
                on_iteration(it + 1, mesh.with_vertices(V))
        if cfg.iterations > 0:
            res.energy.append(energy)
    finally:
        if pool is not None:
            pool.shutdown()
    res.mesh = mesh.with_vertices(V)
    res.step_size = float(step or 0.0)
    return res
