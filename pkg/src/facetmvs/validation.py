"""Audits used by the CLI ``validate`` command and the pipeline gate."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .delaunay import INF, Tetrahedralization
from .geometry import insphere, orient3d
from .mesh import SurfaceMesh, manifold_defects


def _circumspheres(P: np.ndarray):
    """Centers and radii of the circumspheres of tetrahedra ``P`` (n, 4, 3)."""
    a = P[:, 0]
    A = P[:, 1:] - a[:, None, :]
    rhs = 0.5 * np.einsum("ijk,ijk->ij", A, A)
    center = a + np.linalg.solve(A, rhs[..., None])[..., 0]
    return center, np.linalg.norm(center - a, axis=1)


def delaunay_violations(t: Tetrahedralization, limit: int | None = None) -> list[tuple[int, int]]:
    """``(cell, vertex)`` pairs breaking the empty-circumsphere property.

    Floating-point circumspheres only select candidates (with a generous
    margin); every verdict comes from the exact ``insphere`` predicate.
    Hull facets are checked as half-spaces against the opposite interior
    vertex. ``limit`` stops after that many violations.
    """
    pts = t.points
    tree = cKDTree(pts)
    out = []
    finite = t.finite_cells()
    if finite:
        cells = np.array([t.cells[c] for c in finite])
        P = pts[cells]
        center, radius = _circumspheres(P)
        margin = 1e-7 * max(t.bbox_diagonal, 1.0)
        for k, c in enumerate(finite):
            vs = set(cells[k].tolist())
            cand = tree.query_ball_point(center[k], radius[k] + margin)
            a, b, cc, d = (tuple(pts[v]) for v in cells[k])
            o = orient3d(a, b, cc, d)
            for v in sorted(cand):
                if v in vs:
                    continue
                if insphere(a, b, cc, d, tuple(pts[v]), orientation=o) > 0:
                    out.append((c, v))
                    if limit is not None and len(out) >= limit:
                        return out
    for c in t.infinite_cells():
        k = t.cells[c].index(INF)
        nb = t.neighbors[c][k]
        facet = [v for v in t.cells[c] if v != INF]
        inner = [v for v in t.cells[nb] if v not in facet][0]
        a, b, cc = (tuple(pts[v]) for v in facet)
        ref = orient3d(a, b, cc, tuple(pts[inner]))
        for v in range(len(pts)):
            if v in facet:
                continue
            if orient3d(a, b, cc, tuple(pts[v])) == -ref:
                out.append((c, v))
                if limit is not None and len(out) >= limit:
                    return out
    return out


def signed_volume(mesh: SurfaceMesh) -> float:
    V = mesh.vertices
    F = mesh.faces
    return float(np.einsum("ij,ij->i", V[F[:, 0]], np.cross(V[F[:, 1]], V[F[:, 2]])).sum() / 6.0)


def mesh_audit(mesh: SurfaceMesh) -> dict:
    """Manifold and orientation audit of a closed mesh.

    ``outward`` holds when the enclosed signed volume is positive, i.e.
    facet normals point out of the matter region.
    """
    d = manifold_defects(mesh)
    vol = signed_volume(mesh) if mesh.n_faces else 0.0
    manifold = not (d["edges"] or d["vertices"] or d["degenerate_faces"])
    return {
        "manifold": manifold,
        "bad_edges": len(d["edges"]),
        "bad_vertices": len(d["vertices"]),
        "degenerate_faces": len(d["degenerate_faces"]),
        "signed_volume": vol,
        "outward": vol > 0,
        "passed": manifold and vol > 0 and mesh.n_faces > 0,
    }
