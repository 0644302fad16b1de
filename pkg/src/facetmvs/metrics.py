"""Surface accuracy and completeness by area-weighted sampling.

Accuracy: mean distance from points sampled on the reconstruction to the
ground truth. Completeness: mean distance from points sampled on the ground
truth to the reconstruction. Point-to-mesh distances are exact; a KD-tree
over facet centroids only prunes candidates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import SurfaceMesh


def closest_point_on_triangles(P, A, B, C) -> np.ndarray:
    """Closest points of triangles ``(A, B, C)`` to points ``P`` (row-wise)."""
    P, A, B, C = (np.asarray(x, float) for x in (P, A, B, C))
    ab, ac, ap = B - A, C - A, P - A
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = P - B
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = P - C
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(P)
    done = np.zeros(len(P), bool)

    def put(mask, val):
        nonlocal done
        m = mask & ~done
        out[m] = val[m]
        done |= m

    put((d1 <= 0) & (d2 <= 0), A)
    put((d3 >= 0) & (d4 <= d3), B)
    put((d6 >= 0) & (d5 <= d6), C)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), A + t[:, None] * ab)
        t = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), A + t[:, None] * ac)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), B + t[:, None] * (C - B))
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        inner = A + v[:, None] * ab + w[:, None] * ac
    rest = ~done
    out[rest] = inner[rest]
    # degenerate triangles can leave NaN; fall back to the nearest corner
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        corners = np.stack([A[bad], B[bad], C[bad]], axis=1)
        k = np.argmin(np.linalg.norm(corners - P[bad, None, :], axis=2), axis=1)
        out[bad] = corners[np.arange(bad.sum()), k]
    return out


class MeshDistance:
    """Exact unsigned distance from points to a triangle mesh."""

    def __init__(self, mesh: SurfaceMesh, k: int = 16):
        if mesh.n_faces == 0:
            raise ValueError("mesh has no facets")
        V, F = mesh.vertices, mesh.faces
        self.A, self.B, self.C = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
        cen = (self.A + self.B + self.C) / 3.0
        self.radius = float(np.max(np.linalg.norm(np.stack([self.A, self.B, self.C]) - cen, axis=2)))
        self.tree = cKDTree(cen)
        self.k = min(k, mesh.n_faces)

    def _dist(self, P, f):
        Q = closest_point_on_triangles(P, self.A[f], self.B[f], self.C[f])
        return np.linalg.norm(P - Q, axis=1)

    def __call__(self, points) -> np.ndarray:
        P = np.asarray(points, float).reshape(-1, 3)
        dc, idx = self.tree.query(P, k=self.k)
        dc = dc.reshape(len(P), -1)
        idx = idx.reshape(len(P), -1)
        best = np.full(len(P), np.inf)
        for c in range(idx.shape[1]):
            best = np.minimum(best, self._dist(P, idx[:, c]))
        # a facet whose centroid lies beyond the k-th one is at least dc_k - radius away
        unsure = np.flatnonzero(best > dc[:, -1] - self.radius) if self.k < len(self.A) else []
        for p in unsure:
            cand = self.tree.query_ball_point(P[p], best[p] + self.radius)
            if cand:
                cand = np.asarray(cand)
                best[p] = min(best[p], float(self._dist(np.repeat(P[p:p + 1], len(cand), 0), cand).min()))
        return best


def point_mesh_distance(points, mesh: SurfaceMesh) -> np.ndarray:
    return MeshDistance(mesh)(points)


def sample_surface(mesh: SurfaceMesh, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points uniformly distributed by area over the mesh."""
    rng = np.random.default_rng(seed)
    A = mesh.areas()
    if A.sum() <= 0:
        raise ValueError("mesh has zero area")
    f = rng.choice(mesh.n_faces, size=n, p=A / A.sum())
    uv = rng.random((n, 2))
    flip = uv.sum(axis=1) > 1
    uv[flip] = 1 - uv[flip]
    V, F = mesh.vertices, mesh.faces
    P0 = V[F[f, 0]]
    return P0 + (V[F[f, 1]] - P0) * uv[:, :1] + (V[F[f, 2]] - P0) * uv[:, 1:]


@dataclass
class SurfaceScores:
    accuracy: float
    accuracy_median: float
    completeness: float
    completeness_median: float
    n_samples: int

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "accuracy_median": self.accuracy_median,
                "completeness": self.completeness, "completeness_median": self.completeness_median,
                "n_samples": self.n_samples}


def _distances_to(reference, P) -> np.ndarray:
    if hasattr(reference, "distance"):
        return np.asarray(reference.distance(P), float)
    return point_mesh_distance(P, reference)


def accuracy(mesh: SurfaceMesh, reference, n: int = 20000, seed: int = 0) -> float:
    """Mean distance of area samples of ``mesh`` to ``reference``.

    ``reference`` is a :class:`SurfaceMesh` or any object with a
    ``distance(points)`` method (the analytic shapes).
    """
    return float(np.mean(_distances_to(reference, sample_surface(mesh, n, seed))))


def completeness(mesh: SurfaceMesh, reference: SurfaceMesh, n: int = 20000, seed: int = 0) -> float:
    """Mean distance of area samples of ``reference`` to ``mesh``."""
    P = sample_surface(reference, n, seed + 1)
    return float(np.mean(point_mesh_distance(P, mesh)))


def evaluate(mesh: SurfaceMesh, reference, reference_mesh: SurfaceMesh | None = None,
             n: int = 20000, seed: int = 0) -> SurfaceScores:
    """Accuracy against ``reference`` and completeness against ``reference_mesh``.

    ``reference`` may be an analytic shape; completeness then needs a mesh
    of it (``reference_mesh``) to draw area samples from.
    """
    if mesh.n_faces == 0:
        raise ValueError("cannot evaluate an empty mesh")
    ref_mesh = reference_mesh if reference_mesh is not None else reference
    if not isinstance(ref_mesh, SurfaceMesh):
        raise ValueError("completeness needs a reference mesh")
    acc = _distances_to(reference, sample_surface(mesh, n, seed))
    comp = point_mesh_distance(sample_surface(ref_mesh, n, seed + 1), mesh)
    return SurfaceScores(float(np.mean(acc)), float(np.median(acc)),
                         float(np.mean(comp)), float(np.median(comp)), n)
