"""Incremental 3D Delaunay tetrahedralization (Bowyer-Watson).

Cells are stored as vertex quadruples with positive orientation. The
symbolic infinite vertex is ``INF``; a hull facet ``abc`` is closed by the
infinite cell obtained by substituting ``INF`` for the interior vertex, so
that substituting any point strictly outside the hull for ``INF`` gives a
positively oriented tetrahedron.

``neighbors[c][i]`` is the cell across the face opposite ``cells[c][i]``.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.spatial import cKDTree

from .geometry import insphere, orient3d, tet_volume

INF = -1

# face i of a positive cell, ordered so its normal points away from vertex i
FACE_OUT = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))


class Label(IntEnum):
    UNSET = -1
    FREE = 0
    MATTER = 1


class DelaunayError(ValueError):
    pass


@dataclass
class RayWalk:
    """Cells traversed by a segment.

    ``cells[0]`` is the start cell; ``crossings[k]`` describes how
    ``cells[k + 1]`` was entered as ``(previous_cell, face_index, t)`` where
    ``face_index`` indexes the face of the previous cell and ``t`` is the
    segment parameter of the crossing point.
    """

    cells: list = field(default_factory=list)
    crossings: list = field(default_factory=list)
    clipped_start: bool = False
    clipped_end: bool = False
    perturbed: bool = False

    @property
    def empty(self) -> bool:
        return not self.cells


class _Degenerate(Exception):
    pass


def _merge_duplicates(pts: np.ndarray, tol: float):
    """Map each point to a representative; points within ``tol`` collapse."""
    n = len(pts)
    rep = np.arange(n)
    if n > 1 and tol > 0:
        tree = cKDTree(pts)
        pairs = tree.query_pairs(tol, output_type="ndarray")
        if len(pairs):
            parent = list(range(n))

            def find(i):
                while parent[i] != i:
                    parent[i] = parent[parent[i]]
                    i = parent[i]
                return i

            for i, j in pairs:
                ri, rj = find(int(i)), find(int(j))
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
            rep = np.array([find(i) for i in range(n)])
    return rep


class Tetrahedralization:
    """Tetrahedral complex with Delaunay construction, labels and queries."""

    def __init__(self, seed: int = 0):
        self.vertices: list[tuple] = []
        self.cells: list[list[int]] = []
        self.neighbors: list[list[int]] = []
        self.labels: list[int] = []
        self._alive: list[bool] = []
        self._free: list[int] = []
        self._vcell: list[int] = []
        self._inf_cell = -1
        self._rng = random.Random(seed)
        self._last = 0
        self.input_to_vertex = np.zeros(0, dtype=int)
        self.n_input_vertices = 0
        self.bbox_diagonal = 0.0

    # ------------------------------------------------------------------ build
    @classmethod
    def build(cls, points, seed: int = 0, merge_tol: float = 1e-12) -> "Tetrahedralization":
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DelaunayError("points must be an (n, 3) array")
        if not np.all(np.isfinite(pts)):
            raise DelaunayError("points must be finite")
        if len(pts) < 4:
            raise DelaunayError("at least 4 points are required")
        t = cls(seed)
        diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        t.bbox_diagonal = diag
        rep = _merge_duplicates(pts, merge_tol * diag)
        uniq = np.unique(rep)
        vid = -np.ones(len(pts), dtype=int)
        vid[uniq] = np.arange(len(uniq))
        t.input_to_vertex = vid[rep]
        t.vertices = [tuple(map(float, p)) for p in pts[uniq]]
        t.n_input_vertices = len(t.vertices)
        t._vcell = [-1] * len(t.vertices)

        order = list(range(len(t.vertices)))
        rng = np.random.default_rng(seed)
        rng.shuffle(order)
        first = t._initial_simplex(order)
        t._init_cells(first)
        chosen = set(first)
        for v in order:
            if v not in chosen:
                t._insert(v)
        t._compact()
        return t

    def _initial_simplex(self, order):
        P = self.vertices
        a = order[0]
        b = c = d = None
        for v in order[1:]:
            if P[v] != P[a]:
                b = v
                break
        if b is None:
            raise DelaunayError("all points coincide")
        pa, pb = np.array(P[a]), np.array(P[b])
        ab = np.linalg.norm(pb - pa)
        for v in order:
            av = np.array(P[v]) - pa
            cr = np.linalg.norm(np.cross(pb - pa, av))
            if cr > 1e-12 * ab * np.linalg.norm(av):
                c = v
                break
        if c is None:
            raise DelaunayError("all points are collinear")
        for v in order:
            if orient3d(P[a], P[b], P[c], P[v]) != 0:
                d = v
                break
        if d is None:
            raise DelaunayError("all points are coplanar")
        return [a, b, c, d]

    def _new_cell(self, verts, nbrs) -> int:
        if self._free:
            c = self._free.pop()
            self.cells[c] = verts
            self.neighbors[c] = nbrs
            self._alive[c] = True
        else:
            c = len(self.cells)
            self.cells.append(verts)
            self.neighbors.append(nbrs)
            self._alive.append(True)
            self.labels.append(Label.UNSET)
        for v in verts:
            if v == INF:
                self._inf_cell = c
            else:
                self._vcell[v] = c
        return c

    def _init_cells(self, first):
        a, b, c, d = first
        P = self.vertices
        if orient3d(P[a], P[b], P[c], P[d]) < 0:
            a, b = b, a
        base = [a, b, c, d]
        c0 = self._new_cell(list(base), [-1] * 4)
        inf_ids = []
        for i in range(4):
            verts = list(base)
            verts[i] = INF
            # swap two finite entries so INF -> outside point is positive
            j, k = [x for x in range(4) if x != i][:2]
            verts[j], verts[k] = verts[k], verts[j]
            inf_ids.append(self._new_cell(verts, [-1] * 4))
        self._link_all([c0] + inf_ids)

    def _link_all(self, ids):
        faces = {}
        for c in ids:
            vs = self.cells[c]
            for i in range(4):
                key = frozenset(vs[:i] + vs[i + 1:])
                if key in faces:
                    oc, oi = faces.pop(key)
                    self.neighbors[c][i] = oc
                    self.neighbors[oc][oi] = c
                else:
                    faces[key] = (c, i)

    def _point_in_conflict(self, c, p) -> bool:
        P = self.vertices
        vs = self.cells[c]
        if INF in vs:
            i = vs.index(INF)
            q = [P[v] if v != INF else p for v in vs]
            o = orient3d(*q)
            if o > 0:
                return True
            if o < 0:
                return False
            f = self.neighbors[c][i]
            fv = self.cells[f]
            return insphere(P[fv[0]], P[fv[1]], P[fv[2]], P[fv[3]], p, orientation=1) > 0
        return insphere(P[vs[0]], P[vs[1]], P[vs[2]], P[vs[3]], p, orientation=1) > 0

    def _insert(self, v):
        p = self.vertices[v]
        start = self._walk(p, self._last)
        vs = self.cells[start]
        conflict = {start}
        stack = [start]
        boundary = []
        while stack:
            c = stack.pop()
            nb = self.neighbors[c]
            for i in range(4):
                n = nb[i]
                if n in conflict:
                    continue
                if self._point_in_conflict(n, p):
                    conflict.add(n)
                    stack.append(n)
                else:
                    boundary.append((c, i))
        new_ids = []
        edge_faces = {}
        for c, i in boundary:
            verts = list(self.cells[c])
            verts[i] = v
            outer = self.neighbors[c][i]
            nbrs = [-1] * 4
            nbrs[i] = outer
            # mirror index must be taken before any freed id is reused
            new_ids.append((verts, nbrs, outer, self.neighbors[outer].index(c), i))
        for c in conflict:
            self._alive[c] = False
            self._free.append(c)
        created = []
        for verts, nbrs, outer, oi, i in new_ids:
            nc = self._new_cell(verts, nbrs)
            created.append(nc)
            self.neighbors[outer][oi] = nc
            for j in range(4):
                if j == i:
                    continue
                key = tuple(sorted(verts[k] for k in range(4) if k != i and k != j))
                if key in edge_faces:
                    oc, oj = edge_faces.pop(key)
                    self.neighbors[nc][j] = oc
                    self.neighbors[oc][oj] = nc
                else:
                    edge_faces[key] = (nc, j)
        if edge_faces:
            raise DelaunayError("cavity boundary is not closed")
        self._last = created[0]

    def _compact(self):
        alive = [c for c in range(len(self.cells)) if self._alive[c]]
        # finite cells first so finite handles are dense and stable
        alive.sort(key=lambda c: INF in self.cells[c])
        remap = {c: k for k, c in enumerate(alive)}
        self.cells = [self.cells[c] for c in alive]
        self.neighbors = [[remap[n] for n in self.neighbors[c]] for c in alive]
        self.labels = [Label.FREE if INF in vs else Label.UNSET for vs in self.cells]
        self._alive = [True] * len(self.cells)
        self._free = []
        self._vcell = [-1] * len(self.vertices)
        for c, vs in enumerate(self.cells):
            for v in vs:
                if v == INF:
                    self._inf_cell = c
                else:
                    self._vcell[v] = c
        self._last = 0

    def copy(self) -> "Tetrahedralization":
        t = Tetrahedralization.__new__(Tetrahedralization)
        t.__dict__.update(self.__dict__)
        t.vertices = list(self.vertices)
        t.cells = [list(c) for c in self.cells]
        t.neighbors = [list(n) for n in self.neighbors]
        t.labels = list(self.labels)
        t._alive = list(self._alive)
        t._free = list(self._free)
        t._vcell = list(self._vcell)
        t._rng = random.Random()
        t._rng.setstate(self._rng.getstate())
        t.input_to_vertex = self.input_to_vertex.copy()
        return t

    # ---------------------------------------------------------------- queries
    @property
    def points(self) -> np.ndarray:
        return np.array(self.vertices, dtype=float)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def is_infinite(self, c: int) -> bool:
        return INF in self.cells[c]

    def finite_cells(self) -> list[int]:
        return [c for c, vs in enumerate(self.cells) if self._alive[c] and INF not in vs]

    def infinite_cells(self) -> list[int]:
        return [c for c, vs in enumerate(self.cells) if self._alive[c] and INF in vs]

    def cell_points(self, c):
        return [self.vertices[v] for v in self.cells[c]]

    def _check_cell(self, c):
        if not (0 <= c < len(self.cells)) or not self._alive[c]:
            raise IndexError(f"invalid cell handle {c}")

    def _check_vertex(self, v):
        if not (0 <= v < len(self.vertices)):
            raise IndexError(f"invalid vertex handle {v}")

    def _walk(self, p, start) -> int:
        """Stochastic visibility walk; returns a cell containing ``p`` (closed)
        or the infinite cell whose hull facet separates ``p`` from the hull."""
        P = self.vertices
        c = start
        if not self._alive[c]:
            c = self._inf_cell
        if INF in self.cells[c]:
            c = self.neighbors[c][self.cells[c].index(INF)]
        prev = -1
        rnd = self._rng.randrange
        while True:
            vs = self.cells[c]
            off = rnd(4)
            moved = False
            for k in range(4):
                i = (k + off) & 3
                n = self.neighbors[c][i]
                if n == prev:
                    continue
                q = [P[x] for x in vs]
                q[i] = p
                if orient3d(*q) < 0:
                    prev, c = c, n
                    moved = True
                    break
            if not moved:
                return c
            if INF in self.cells[c]:
                return c

    def _contains(self, c, p) -> list[int] | None:
        """Orientation signs of ``p`` against the faces of finite cell ``c``."""
        P = self.vertices
        vs = self.cells[c]
        signs = []
        for i in range(4):
            q = [P[x] for x in vs]
            q[i] = p
            signs.append(orient3d(*q))
        return signs

    def locate(self, p, start: int | None = None):
        """Finite cell containing ``p`` or ``None`` when ``p`` is outside the hull.

        On shared boundaries the incident cell with the lowest index wins.
        """
        p = tuple(float(x) for x in p)
        c = self._walk(p, self._last if start is None else start)
        if INF in self.cells[c]:
            return None
        self._last = c
        signs = self._contains(c, p)
        if 0 not in signs:
            return c
        # p on a face/edge/vertex: collect all closed cells containing p
        best = c
        seen = {c}
        stack = [c]
        while stack:
            x = stack.pop()
            best = min(best, x)
            sx = self._contains(x, p)
            for i in range(4):
                if sx[i] == 0:
                    n = self.neighbors[x][i]
                    if n in seen or INF in self.cells[n]:
                        continue
                    seen.add(n)
                    if min(self._contains(n, p)) >= 0:
                        stack.append(n)
        return best

    def incident_cells(self, v: int) -> set[int]:
        """All cells (finite and infinite) having ``v`` as a vertex."""
        self._check_vertex(v)
        start = self._vcell[v]
        out = {start}
        stack = [start]
        cells, nbrs = self.cells, self.neighbors
        while stack:
            c = stack.pop()
            vs = cells[c]
            for i in range(4):
                if vs[i] == v:
                    continue
                n = nbrs[c][i]
                if n not in out:
                    out.add(n)
                    stack.append(n)
        return out

    def edges(self) -> set[tuple[int, int]]:
        out = set()
        for c in self.finite_cells():
            vs = self.cells[c]
            for i in range(4):
                for j in range(i + 1, 4):
                    a, b = vs[i], vs[j]
                    out.add((a, b) if a < b else (b, a))
        return out

    def edge_lengths(self) -> np.ndarray:
        """Length of every finite edge, each edge once, sorted by vertex pair."""
        P = self.points
        e = np.array(sorted(self.edges()), dtype=int).reshape(-1, 2)
        return np.linalg.norm(P[e[:, 0]] - P[e[:, 1]], axis=1)

    def volume(self) -> float:
        P = self.vertices
        return sum(tet_volume(*(P[v] for v in self.cells[c])) for c in self.finite_cells())

    def facet_vertices(self, c: int, i: int) -> tuple[int, int, int]:
        vs = self.cells[c]
        a, b, d = FACE_OUT[i]
        return vs[a], vs[b], vs[d]

    def mirror_index(self, c: int, i: int) -> int:
        n = self.neighbors[c][i]
        return self.neighbors[n].index(c)

    # --------------------------------------------------------------- ray walk
    def _hull_entry(self, a, b):
        """First crossing of segment ab with the hull boundary, as (inf_cell, t)."""
        inf = self.infinite_cells()
        P = self.points
        tris = []
        for c in inf:
            vs = self.cells[c]
            tris.append([v for v in vs if v != INF])
        tris = np.array(tris, dtype=int)
        v0, v1, v2 = P[tris[:, 0]], P[tris[:, 1]], P[tris[:, 2]]
        a_ = np.asarray(a)
        d = np.asarray(b) - a_
        e1, e2 = v1 - v0, v2 - v0
        h = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, h)
        ok = np.abs(det) > 1e-300
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = a_ - v0
        u = np.einsum("ij,ij->i", s, h) * inv
        q = np.cross(s, e1)
        w = (q @ d) * inv
        t = np.einsum("ij,ij->i", e2, q) * inv
        hit = ok & (u >= 0) & (w >= 0) & (u + w <= 1) & (t > 0) & (t < 1)
        if not hit.any():
            return None
        k = np.flatnonzero(hit)[np.argmin(t[hit])]
        return inf[k], float(t[k])

    def _walk_segment(self, a, b) -> RayWalk:
        P = self.vertices
        walk = RayWalk()
        c = self.locate(a)
        ein = -1
        if c is None:
            entry = self._hull_entry(a, b)
            if entry is None:
                walk.clipped_start = True
                return walk
            ic, t = entry
            fi = self.cells[ic].index(INF)
            c = self.neighbors[ic][fi]
            ein = self.mirror_index(ic, fi)
            walk.cells.append(ic)
            walk.crossings.append((ic, fi, t))
            walk.clipped_start = True
        walk.cells.append(c)
        seen = {c}
        while True:
            vs = self.cells[c]
            pts = [P[x] for x in vs]
            ob = []
            for i in range(4):
                q = list(pts)
                q[i] = b
                ob.append(orient3d(*q))
            if min(ob) >= 0:
                return walk
            exit_face = -1
            for i in range(4):
                if i == ein or ob[i] >= 0:
                    continue
                x, y, z = (pts[k] for k in FACE_OUT[i])
                s1 = orient3d(a, b, x, y)
                s2 = orient3d(a, b, y, z)
                s3 = orient3d(a, b, z, x)
                if s1 == s2 == s3 and s1 != 0:
                    exit_face = i
                    break
                if (s1 >= 0 and s2 >= 0 and s3 >= 0) or (s1 <= 0 and s2 <= 0 and s3 <= 0):
                    raise _Degenerate
            if exit_face < 0:
                raise _Degenerate
            x, y, z = (np.array(pts[k]) for k in FACE_OUT[exit_face])
            nrm = np.cross(y - x, z - x)
            da = float(np.dot(np.subtract(a, x), nrm))
            db = float(np.dot(np.subtract(b, x), nrm))
            t = da / (da - db) if da != db else 1.0
            n = self.neighbors[c][exit_face]
            walk.crossings.append((c, exit_face, t))
            walk.cells.append(n)
            if INF in self.cells[n]:
                walk.clipped_end = True
                return walk
            if n in seen:
                raise _Degenerate
            seen.add(n)
            ein = self.mirror_index(c, exit_face)
            c = n

    def walk_ray(self, a, b) -> RayWalk:
        """Cells crossed by the open segment from ``a`` to ``b``.

        When the segment passes exactly through an edge or a vertex the end
        point is nudged by ``1e-10`` times the bounding-box diagonal along a
        fixed direction and the walk is repeated.
        """
        a = tuple(float(x) for x in a)
        b = tuple(float(x) for x in b)
        if a == b:
            raise ValueError("segment end points coincide")
        dirs = np.array([[1.0, 2 ** 0.5, 3 ** 0.5], [-(5 ** 0.5), 1.0, 7 ** 0.5],
                         [11 ** 0.5, -(13 ** 0.5), 1.0]])
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        step = 1e-10 * max(self.bbox_diagonal, 1e-300)
        bb = b
        for attempt in range(10):
            try:
                walk = self._walk_segment(a, bb)
                walk.perturbed = attempt > 0
                return walk
            except _Degenerate:
                d = dirs[attempt % 3] * (attempt // 3 + 1)
                bb = tuple(float(x) for x in np.asarray(b) + step * d)
        raise DelaunayError("ray walk could not escape a degenerate configuration")

    # ----------------------------------------------------------------- splits
    def centroid_split(self, c: int) -> list[int]:
        """Replace finite cell ``c`` by four cells around its centroid.

        This is a local 1-to-4 subdivision; it does not restore the Delaunay
        property. The new cells inherit the label of ``c``.
        """
        self._check_cell(c)
        vs = list(self.cells[c])
        if INF in vs:
            raise ValueError("cannot split an infinite cell")
        P = self.vertices
        g = tuple(sum(P[v][k] for v in vs) / 4.0 for k in range(3))
        gv = len(self.vertices)
        self.vertices.append(g)
        self._vcell.append(c)
        label = self.labels[c]
        old_nbrs = list(self.neighbors[c])
        ids = [c]
        for _ in range(3):
            ids.append(len(self.cells))
            self.cells.append(None)
            self.neighbors.append(None)
            self._alive.append(True)
            self.labels.append(label)
        for k in range(4):
            verts = list(vs)
            verts[k] = gv
            nbrs = [ids[j] for j in range(4)]
            nbrs[k] = old_nbrs[k]
            self.cells[ids[k]] = verts
            self.neighbors[ids[k]] = nbrs
            self.labels[ids[k]] = label
            outer = old_nbrs[k]
            onb = self.neighbors[outer]
            onb[onb.index(c)] = ids[k]
        for k in range(4):
            for v in self.cells[ids[k]]:
                self._vcell[v] = ids[k]
        return ids

    # ------------------------------------------------------------------ debug
    def dump_ascii(self) -> str:
        """Cell list: header, then ``cell v0 v1 v2 v3 label`` (INF as -1)."""
        lines = [f"{self.n_vertices} {self.n_cells}"]
        for c, vs in enumerate(self.cells):
            lines.append(f"{c} {vs[0]} {vs[1]} {vs[2]} {vs[3]} {int(self.labels[c])}")
        return "\n".join(lines) + "\n"

    def check_adjacency(self) -> None:
        """Raise ``AssertionError`` if neighbor links are inconsistent."""
        faces = {}
        for c, vs in enumerate(self.cells):
            if not self._alive[c]:
                continue
            for i in range(4):
                n = self.neighbors[c][i]
                assert self._alive[n], f"cell {c} points to dead cell {n}"
                assert c in self.neighbors[n], f"asymmetric neighbors {c} {n}"
                key = frozenset(vs[:i] + vs[i + 1:])
                j = self.neighbors[n].index(c)
                nvs = self.cells[n]
                assert key == frozenset(nvs[:j] + nvs[j + 1:]), "shared face mismatch"
                faces[key] = faces.get(key, 0) + 1
        for key, count in faces.items():
            assert count == 2, f"face {sorted(key)} shared by {count} cells"
