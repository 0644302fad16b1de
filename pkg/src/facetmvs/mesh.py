"""Indexed triangle mesh and the literal 2-manifold audit."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from .geometry import triangle_areas, triangle_normals


class SurfaceMesh:
    """Triangle mesh with optional provenance.

    ``source_cells[f]`` is the matter cell a facet was extracted from (or -1)
    and ``vertex_ids[v]`` the triangulation vertex a mesh vertex came from
    (or -1 for vertices created later).
    """

    def __init__(self, vertices, faces, source_cells=None, vertex_ids=None):
        self.vertices = np.array(vertices, dtype=float).reshape(-1, 3)
        self.faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
        nf, nv = len(self.faces), len(self.vertices)
        if nf and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise ValueError("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("vertex coordinates must be finite")
        self.source_cells = (np.full(nf, -1, dtype=np.int64) if source_cells is None
                             else np.asarray(source_cells, dtype=np.int64).copy())
        self.vertex_ids = (np.full(nv, -1, dtype=np.int64) if vertex_ids is None
                           else np.asarray(vertex_ids, dtype=np.int64).copy())
        if len(self.source_cells) != nf or len(self.vertex_ids) != nv:
            raise ValueError("provenance arrays do not match mesh size")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "SurfaceMesh":
        return SurfaceMesh(self.vertices, self.faces, self.source_cells, self.vertex_ids)

    def with_vertices(self, vertices) -> "SurfaceMesh":
        v = np.asarray(vertices, dtype=float)
        if v.shape != self.vertices.shape:
            raise ValueError("vertex array shape changed")
        return SurfaceMesh(v, self.faces, self.source_cells, self.vertex_ids)

    def normals(self) -> np.ndarray:
        return triangle_normals(self.vertices, self.faces)

    def areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.faces)

    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(a, b)`` rows."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def edge_lengths(self) -> np.ndarray:
        e = self.edges()
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def neighbors(self) -> list[np.ndarray]:
        """1-ring vertex neighbors, sorted."""
        e = self.edges()
        ring = [[] for _ in range(self.n_vertices)]
        for a, b in e:
            ring[a].append(b)
            ring[b].append(a)
        return [np.array(sorted(r), dtype=np.int64) for r in ring]

    def face_adjacency(self) -> list[tuple[int, int]]:
        """Pairs of facets sharing an edge (``f < g``)."""
        by_edge = defaultdict(list)
        for fi, tri in enumerate(self.faces):
            for k in range(3):
                a, b = int(tri[k]), int(tri[(k + 1) % 3])
                by_edge[(min(a, b), max(a, b))].append(fi)
        pairs = set()
        for fs in by_edge.values():
            for i in range(len(fs)):
                for j in range(i + 1, len(fs)):
                    pairs.add((min(fs[i], fs[j]), max(fs[i], fs[j])))
        return sorted(pairs)

    def compact(self) -> "SurfaceMesh":
        """Drop vertices no facet references."""
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.faces.ravel()] = True
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[used] = np.arange(used.sum())
        return SurfaceMesh(self.vertices[used], remap[self.faces], self.source_cells,
                           self.vertex_ids[used])


def manifold_defects(mesh: SurfaceMesh) -> dict:
    """Literal closed 2-manifold audit.

    Every edge must be shared by exactly two facets traversing it in opposite
    directions, and the facets around every referenced vertex must form a
    single closed fan. Returns lists of offending edges and vertices.
    """
    directed = defaultdict(int)
    undirected = defaultdict(int)
    for tri in mesh.faces:
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            directed[(a, b)] += 1
            undirected[(min(a, b), max(a, b))] += 1
    bad_edges = sorted(e for e, n in undirected.items()
                       if n != 2 or directed.get(e, 0) != 1 or directed.get(e[::-1], 0) != 1)
    degenerate = [int(f) for f, tri in enumerate(mesh.faces) if len(set(tri.tolist())) < 3]

    # the link of v: each facet (v, a, b) contributes the link edge a-b
    link = defaultdict(list)
    for tri in mesh.faces:
        t = [int(x) for x in tri]
        for k in range(3):
            link[t[k]].append((t[(k + 1) % 3], t[(k + 2) % 3]))
    bad_vertices = []
    for v, ledges in link.items():
        deg = defaultdict(int)
        adj = defaultdict(list)
        for a, b in ledges:
            deg[a] += 1
            deg[b] += 1
            adj[a].append(b)
            adj[b].append(a)
        if any(d != 2 for d in deg.values()):
            bad_vertices.append(v)
            continue
        start = next(iter(adj))
        seen = {start}
        stack = [start]
        while stack:
            x = stack.pop()
            for y in adj[x]:
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        if len(seen) != len(adj):
            bad_vertices.append(v)
    return {"edges": bad_edges, "vertices": sorted(bad_vertices), "degenerate_faces": degenerate}


def is_manifold(mesh: SurfaceMesh) -> bool:
    d = manifold_defects(mesh)
    return not (d["edges"] or d["vertices"] or d["degenerate_faces"])


def icosphere(subdivisions: int = 2) -> SurfaceMesh:
    """Unit icosphere with outward-oriented facets."""
    t = (1.0 + 5 ** 0.5) / 2.0
    V = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    F = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in V]
    faces = list(F)
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    return SurfaceMesh(np.array(verts), np.array(faces))


def grid_box(center, half: float, n: int) -> SurfaceMesh:
    """Axis-aligned cube surface, each side an ``n x n`` quad grid split into triangles."""
    center = np.asarray(center, float)
    verts = {}
    V = []
    F = []

    def vid(p):
        key = tuple(np.round(p / half * n).astype(int))
        if key not in verts:
            verts[key] = len(V)
            V.append(p)
        return verts[key]

    g = np.linspace(-half, half, n + 1)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            for i in range(n):
                for j in range(n):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign * half
                        p[u_ax] = g[i + di]
                        p[v_ax] = g[j + dj]
                        quad.append(vid(p))
                    a, b, c, d = quad
                    tris = [(a, b, c), (a, c, d)]
                    for tri in tris:
                        P = [V[k] for k in tri]
                        nrm = np.cross(P[1] - P[0], P[2] - P[0])
                        if nrm[axis] * sign < 0:
                            tri = (tri[0], tri[2], tri[1])
                        F.append(tri)
    return SurfaceMesh(np.array(V) + center, np.array(F))
