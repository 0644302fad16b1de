"""Singular vertices of a free/matter labeling and their repair.

A vertex is singular when the cells around it split into three or more
facet-connected groups across both labels. Infinite cells count as free
space. Repair first relabels minority groups, then splits them at their
centroids to escape local minima, then relabels again; whatever survives
is handled on the extracted mesh by duplicating vertices once per fan.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .delaunay import FACE_OUT, INF, Label, Tetrahedralization
from .mesh import SurfaceMesh

log = logging.getLogger(__name__)

FREE = int(Label.FREE)
MATTER = int(Label.MATTER)


def _label(t: Tetrahedralization, c: int) -> int:
    if INF in t.cells[c]:
        return FREE
    lab = int(t.labels[c])
    if lab == int(Label.UNSET):
        raise ValueError(f"cell {c} is unlabeled")
    return lab


def vertex_components(t: Tetrahedralization, v: int):
    """Facet-connected groups of the cells around ``v``.

    Returns ``(free_components, matter_components)``; each component is a
    sorted list of cell ids and components are ordered by their smallest id.
    """
    star = sorted(t.incident_cells(v))
    lab = {c: _label(t, c) for c in star}
    seen = set()
    comps = {FREE: [], MATTER: []}
    for c0 in star:
        if c0 in seen:
            continue
        seen.add(c0)
        comp = [c0]
        stack = [c0]
        while stack:
            c = stack.pop()
            vs = t.cells[c]
            for i in range(4):
                if vs[i] == v:
                    continue
                n = t.neighbors[c][i]
                if n not in seen and lab[n] == lab[c0]:
                    seen.add(n)
                    comp.append(n)
                    stack.append(n)
        comps[lab[c0]].append(sorted(comp))
    return comps[FREE], comps[MATTER]


def is_singular(t: Tetrahedralization, v: int) -> bool:
    f, m = vertex_components(t, v)
    return len(f) + len(m) > 2


def _cell_arrays(t: Tetrahedralization):
    cells = np.array(t.cells, dtype=np.int64).reshape(-1, 4)
    nbrs = np.array(t.neighbors, dtype=np.int64).reshape(-1, 4)
    lab = np.array([int(x) for x in t.labels], dtype=np.int64)
    inf = (cells == INF).any(axis=1)
    lab[inf] = FREE
    if np.any(lab == int(Label.UNSET)):
        raise ValueError("triangulation has unlabeled cells")
    return cells, nbrs, lab


def component_counts(t: Tetrahedralization):
    """Per-vertex numbers of free and matter components, for all vertices at once.

    Nodes are (cell, corner) incidences; two incidences of the same vertex
    are joined when their cells share a facet containing that vertex and
    carry the same label.
    """
    cells, nbrs, lab = _cell_arrays(t)
    n = len(cells)
    rows, cols = [], []
    for i in range(4):
        nb = nbrs[:, i]
        ok = (np.arange(n) < nb) & (lab == lab[nb])
        c_idx = np.flatnonzero(ok)
        nb_idx = nb[ok]
        for k in range(4):
            if k == i:
                continue
            v = cells[c_idx, k]
            pos = np.argmax(cells[nb_idx] == v[:, None], axis=1)
            rows.append(4 * c_idx + k)
            cols.append(4 * nb_idx + pos)
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(4 * n, 4 * n))
    _, comp = connected_components(graph, directed=False)
    verts = cells.ravel()
    node_lab = np.repeat(lab, 4)
    real = verts != INF
    key = np.unique(np.stack([verts[real], comp[real], node_lab[real]], axis=1), axis=0)
    nv = t.n_vertices
    n_free = np.bincount(key[key[:, 2] == FREE, 0], minlength=nv)
    n_matter = np.bincount(key[key[:, 2] == MATTER, 0], minlength=nv)
    return n_free, n_matter


def singular_vertices(t: Tetrahedralization) -> list[int]:
    f, m = component_counts(t)
    return np.flatnonzero(f + m > 2).tolist()


def _by_size(comps):
    # ascending cardinality; among equal sizes the one with the lowest cell id sorts last
    return sorted(comps, key=lambda c: (len(c), -c[0]))


def singular_vertex_fixing(t: Tetrahedralization, vertices, split: bool) -> int:
    """One fixing sweep over ``vertices`` (ascending, stale entries skipped).

    Returns the number of cells relabeled or split. Infinite cells are
    never relabeled or split.
    """
    touched = 0
    for v in sorted(set(int(x) for x in vertices)):
        if v >= t.n_vertices:
            continue
        free, matter = vertex_components(t, v)
        if len(free) + len(matter) <= 2:
            continue
        for comp in _by_size(matter)[:-1]:
            for c in comp:
                if split:
                    t.centroid_split(c)
                else:
                    t.labels[c] = Label.FREE
                touched += 1
        free, _ = vertex_components(t, v)
        for comp in _by_size(free)[:-1]:
            for c in comp:
                if INF in t.cells[c]:
                    continue
                if split:
                    t.centroid_split(c)
                else:
                    t.labels[c] = Label.MATTER
                touched += 1
    return touched


@dataclass
class CleanupReport:
    """Singular-vertex counts before and after each of the three passes."""

    counts: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    @property
    def before(self) -> int:
        return self.counts[0]

    @property
    def after(self) -> int:
        return self.counts[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["vertex", "free_components", "matter_components", "pass_fixed"])
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()


def cleanup(t: Tetrahedralization) -> CleanupReport:
    """Relabel, split, relabel: the fixed three-pass schedule.

    ``rows`` lists every initially singular vertex with its component counts
    and the pass after which it stopped being singular (-1 if it never did).
    """
    report = CleanupReport()
    f, m = component_counts(t)
    current = np.flatnonzero(f + m > 2).tolist()
    report.counts.append(len(current))
    fixed_at = {v: -1 for v in current}
    initial = {v: (int(f[v]), int(m[v])) for v in current}
    for k, split in enumerate((False, True, False), start=1):
        singular_vertex_fixing(t, current, split)
        current = singular_vertices(t)
        report.counts.append(len(current))
        still = set(current)
        for v in fixed_at:
            if fixed_at[v] == -1 and v not in still:
                fixed_at[v] = k
    report.rows = [(v, initial[v][0], initial[v][1], fixed_at[v]) for v in sorted(fixed_at)]
    return report


def extract_surface(t: Tetrahedralization) -> SurfaceMesh:
    """Boundary facets between matter and free cells, oriented matter to free.

    Facets are emitted in (cell, face) order; mesh vertices keep ascending
    triangulation order and remember their triangulation ids.
    """
    cells, nbrs, lab = _cell_arrays(t)
    tris, src = [], []
    for c in np.flatnonzero(lab == MATTER):
        for i in range(4):
            if lab[nbrs[c, i]] == FREE:
                a, b, d = FACE_OUT[i]
                tris.append((cells[c, a], cells[c, b], cells[c, d]))
                src.append(c)
    if not tris:
        return SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    tris = np.array(tris, dtype=np.int64)
    used = np.unique(tris)
    remap = -np.ones(t.n_vertices, dtype=np.int64)
    remap[used] = np.arange(len(used))
    P = t.points
    return SurfaceMesh(P[used], remap[tris], np.array(src), used)


def _edge_order(mesh: SurfaceMesh, a: int, b: int, fs: list[int]):
    """Facets around a non-manifold edge in angular order, plus the pairing offset.

    Facet normals point into free space, so each facet is paired with its
    angular neighbor on the side opposite its normal (the matter wedge).
    The pairs are ``(k, k + 1)`` for ``k = offset, offset + 2, ...``
    (cyclically); ``offset`` is 0 when the geometry is inconsistent.
    """
    V = mesh.vertices
    e = V[b] - V[a]
    e /= np.linalg.norm(e)
    p = np.cross(e, [1.0, 0.0, 0.0])
    if np.linalg.norm(p) < 0.5:
        p = np.cross(e, [0.0, 1.0, 0.0])
    p /= np.linalg.norm(p)
    q = np.cross(e, p)
    normals = mesh.normals()
    ang, side = [], []
    for f in fs:
        tri = mesh.faces[f]
        c = [x for x in tri if x != a and x != b][0]
        d = V[c] - V[a]
        ang.append(np.arctan2(d @ q, d @ p))
        u = d - (d @ e) * e
        # +1: free side lies toward increasing angle
        side.append(1 if normals[f] @ np.cross(e, u) > 0 else -1)
    order = np.argsort(ang, kind="stable")
    fs_sorted = [fs[k] for k in order]
    side_sorted = [side[k] for k in order]
    m = len(fs_sorted)
    partner = {k: (k - 1) % m if side_sorted[k] > 0 else (k + 1) % m for k in range(m)}
    if m % 2 == 0 and all(partner[partner[k]] == k for k in range(m)):
        return fs_sorted, 0 if partner[0] == 1 % m else 1
    # inconsistent geometry (coincident wedges): pair cyclic neighbors
    return fs_sorted, 0


def _pair_around_edge(mesh: SurfaceMesh, a: int, b: int, fs: list[int]):
    """Pairs of facets glued across a non-manifold edge, by matter wedge."""
    fs_sorted, offset = _edge_order(mesh, a, b, fs)
    m = len(fs_sorted)
    if m % 2:
        return [(fs_sorted[k], fs_sorted[k + 1]) for k in range(0, m - 1, 2)]
    return [(fs_sorted[k % m], fs_sorted[(k + 1) % m]) for k in range(offset, offset + m, 2)]


def fans(mesh: SurfaceMesh, pairing=None) -> dict[int, list[list[int]]]:
    """Facet fans around every vertex, as lists of facet ids.

    Two facets around ``v`` belong to the same fan when they share an edge
    at ``v`` and are paired across it. Non-manifold edges are paired by
    matter wedge unless ``pairing`` maps the edge (as a ``(min, max)``
    vertex pair) to an explicit list of facet pairs.
    """
    pairing = pairing or {}
    by_edge = defaultdict(list)
    for fi, tri in enumerate(mesh.faces):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            by_edge[(min(a, b), max(a, b))].append(fi)
    partner = {}
    for (a, b), fs in by_edge.items():
        if len(fs) == 2:
            pairs = [tuple(fs)]
        elif (a, b) in pairing:
            pairs = pairing[(a, b)]
        elif len(fs) > 2:
            pairs = _pair_around_edge(mesh, a, b, fs)
        else:
            pairs = []
        for f, g in pairs:
            partner[(f, a, b)] = g
            partner[(g, a, b)] = f
    incident = defaultdict(list)
    for fi, tri in enumerate(mesh.faces):
        for x in tri:
            incident[int(x)].append(fi)
    out = {}
    for v, fs in incident.items():
        parent = {f: f for f in fs}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for f in fs:
            for w in mesh.faces[f]:
                w = int(w)
                if w == v:
                    continue
                g = partner.get((f, min(v, w), max(v, w)))
                if g is not None and g in parent:
                    ra, rb = find(f), find(g)
                    if ra != rb:
                        parent[max(ra, rb)] = min(ra, rb)
        groups = defaultdict(list)
        for f in fs:
            groups[find(f)].append(f)
        out[v] = sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])
    return out


def _split(mesh: SurfaceMesh, groups):
    faces = mesh.faces.copy()
    verts = [mesh.vertices]
    ids = [mesh.vertex_ids]
    origin = list(range(mesh.n_vertices))
    nxt = mesh.n_vertices
    for v in sorted(groups):
        for fan in groups[v][1:]:
            for f in fan:
                faces[f][faces[f] == v] = nxt
            verts.append(mesh.vertices[v][None, :])
            ids.append(np.array([-1]))
            origin.append(v)
            nxt += 1
    out = SurfaceMesh(np.concatenate(verts), faces, mesh.source_cells, np.concatenate(ids))
    return out, np.array(origin)


def vertex_split_fallback(mesh: SurfaceMesh, max_rounds: int = 20) -> SurfaceMesh:
    """Duplicate every vertex once per extra fan; coordinates are copied.

    The fan holding the lowest facet id keeps the original vertex; the
    copies are appended in ascending (vertex, fan) order and carry no
    triangulation id. A non-manifold edge whose facets still share a fan at
    both ends after the split is re-paired from the fan structure at one
    end (see :func:`_separating_pairs`) and the split is redone.
    """
    pairing = {}
    for round_ in range(max_rounds):
        out, origin = _split(mesh, fans(mesh, pairing))
        count = defaultdict(int)
        for tri in out.faces:
            for k in range(3):
                a, b = int(tri[k]), int(tri[(k + 1) % 3])
                count[(min(a, b), max(a, b))] += 1
        bad = sorted({tuple(sorted((int(origin[a]), int(origin[b])))) for (a, b), n in count.items() if n > 2})
        if not bad:
            return out
        for a, b in bad:
            # alternate the end that gets separated so the two ends cannot undo each other
            v = (a, b)[round_ % 2]
            pairs = _separating_pairs(mesh, pairing, (a, b), v)
            if pairs is not None:
                pairing[(a, b)] = pairs
    log.warning("vertex split left %d non-manifold edges", len(bad))
    return out


def _separating_pairs(mesh: SurfaceMesh, pairing, edge, v):
    """A pairing of ``edge``'s facets that puts each pair in its own fan at ``v``.

    With the edge left unpaired, the fans at ``v`` that touch it are chains
    whose two ends are facets of the edge; gluing each chain's ends closes
    it into a separate fan. Returns None when the chains are not of that form.
    """
    groups = fans(mesh, {**pairing, edge: []})[v]
    a, b = edge
    on_edge = {f for f, tri in enumerate(mesh.faces) if a in tri and b in tri}
    pairs = []
    for g in groups:
        ends = [f for f in g if f in on_edge]
        if not ends:
            continue
        if len(ends) != 2:
            return None
        pairs.append(tuple(ends))
    return pairs
