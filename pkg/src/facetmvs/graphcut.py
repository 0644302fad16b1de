"""Free-space / matter labeling of a tetrahedralization by s-t minimum cut.

Each finite tetrahedron is a node. Camera-to-point visibility rays vote on
the facet arcs they cross, on a source link at the camera and on a sink link
a few ``sigma`` behind the point. Infinite cells are glued to the source:
they are free space by construction.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .delaunay import INF, DelaunayError, Label, Tetrahedralization

log = logging.getLogger(__name__)


@dataclass
class VisParams:
    alpha_vis: float = 32.0
    sigma: float | None = None
    sink_offset_mult: float = 3.0
    quality_weight: float = 1.0
    # "gaussian": 1 - exp(-d^2 / 2 sigma^2); "literal": 1 - exp(d / 2 sigma)
    weight_mode: str = "gaussian"

    def __post_init__(self):
        if not self.alpha_vis > 0:
            raise ValueError("alpha_vis must be positive")
        if self.quality_weight < 0:
            raise ValueError("quality_weight must be non-negative")
        if self.weight_mode not in ("gaussian", "literal"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")


def compute_sigma(t: Tetrahedralization) -> float:
    """Nearest-rank 25th percentile of the finite edge lengths."""
    lengths = np.sort(t.edge_lengths())
    if len(lengths) == 0:
        raise ValueError("triangulation has no finite edge")
    return float(percentile_nearest_rank(lengths, 25.0))


def percentile_nearest_rank(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[rank - 1])


def facet_weight(d: float, sigma: float, mode: str = "gaussian") -> float:
    """Visibility vote multiplier for a facet at distance ``d`` before the point."""
    if mode == "gaussian":
        return 1.0 - math.exp(-(d * d) / (2.0 * sigma * sigma))
    # this form is negative for d > 0; clamp so capacities stay valid
    return max(0.0, 1.0 - math.exp(d / (2.0 * sigma)))


class FlowGraph:
    """Capacities over the cell adjacency of a tetrahedralization.

    ``face_cap[c, i]`` is the capacity of the arc leaving cell ``c`` through
    its face ``i``. Arcs touching infinite cells are kept here and folded
    into source links when the cut is solved.
    """

    def __init__(self, t: Tetrahedralization):
        n = t.n_cells
        self.n_cells = n
        self.face_cap = np.zeros((n, 4))
        self.source_cap = np.zeros(n)
        self.sink_cap = np.zeros(n)
        self.finite = np.array([not t.is_infinite(c) for c in range(n)], dtype=bool)
        self.neighbors = np.array(t.neighbors, dtype=int).reshape(n, 4)
        self.rays_skipped = 0
        self.sinks_skipped = 0
        self.sinks_clamped = 0

    def copy(self) -> "FlowGraph":
        g = object.__new__(FlowGraph)
        g.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                           for k, v in self.__dict__.items()})
        return g

    def mirror(self):
        """``mirror[c, i]``: face index of ``c`` as seen from its i-th neighbor."""
        n = self.n_cells
        m = np.zeros((n, 4), dtype=int)
        for c in range(n):
            for i in range(4):
                m[c, i] = int(np.flatnonzero(self.neighbors[self.neighbors[c, i]] == c)[0])
        return m

    def folded(self):
        """Node-level graph: ``(nodes, arcs, src, snk)``.

        ``nodes`` lists finite cell ids; ``arcs`` holds ``(u, v, cap_uv, cap_vu)``
        per finite facet, indexed by node position.
        """
        nodes = np.flatnonzero(self.finite)
        pos = -np.ones(self.n_cells, dtype=int)
        pos[nodes] = np.arange(len(nodes))
        src = self.source_cap[nodes].copy()
        snk = self.sink_cap[nodes].copy()
        arcs = []
        for c in nodes:
            for i in range(4):
                n = self.neighbors[c, i]
                j = int(np.flatnonzero(self.neighbors[n] == c)[0])
                if self.finite[n]:
                    if c < n:
                        arcs.append((pos[c], pos[n], self.face_cap[c, i], self.face_cap[n, j]))
                else:
                    src[pos[c]] += self.face_cap[n, j]
        return nodes, arcs, src, snk

    def dump_ascii(self) -> str:
        """``n_nodes n_arcs`` header then ``u v capacity`` lines.

        Nodes are finite cells in ascending id order; source is ``n_nodes``
        and sink ``n_nodes + 1``. Zero-capacity arcs are omitted.
        """
        nodes, arcs, src, snk = self.folded()
        n = len(nodes)
        lines = []
        for k in range(n):
            if src[k] > 0:
                lines.append(f"{n} {k} {src[k]!r}")
            if snk[k] > 0:
                lines.append(f"{k} {n + 1} {snk[k]!r}")
        for u, v, a, b in arcs:
            if a > 0:
                lines.append(f"{u} {v} {a!r}")
            if b > 0:
                lines.append(f"{v} {u} {b!r}")
        return f"{n} {len(lines)}\n" + "\n".join(lines) + ("\n" if lines else "")


def accumulate_ray(g: FlowGraph, t: Tetrahedralization, camera_center, point,
                   params: VisParams, sigma: float | None = None) -> bool:
    """Add the votes of one camera-to-point ray. Returns False if skipped."""
    sigma = params.sigma if sigma is None else sigma
    if sigma is None or not sigma > 0:
        raise ValueError("sigma must be computed before accumulating rays")
    a = np.asarray(camera_center, dtype=float)
    b = np.asarray(point, dtype=float)
    length = float(np.linalg.norm(b - a))
    walk = t.walk_ray(a, b)
    if walk.empty:
        g.rays_skipped += 1
        return False
    alpha = params.alpha_vis
    first = walk.cells[0]
    if not t.is_infinite(first) and not walk.clipped_start:
        g.source_cap[first] += alpha
    for prev, face, tp in walk.crossings:
        d = (1.0 - tp) * length
        g.face_cap[prev, face] += alpha * facet_weight(d, sigma, params.weight_mode)
    direction = (b - a) / length
    behind = b + params.sink_offset_mult * sigma * direction
    c = t.locate(behind)
    if c is None:
        # behind the hull: clamp to the last cell the extended ray leaves through
        c = _exit_cell(t, a, behind)
        g.sinks_clamped += 1
    if c is None:
        g.sinks_skipped += 1
    else:
        g.sink_cap[c] += alpha
    return True


def _exit_cell(t: Tetrahedralization, a, behind):
    try:
        walk = t.walk_ray(a, behind)
    except DelaunayError:
        return None
    finite = [c for c in walk.cells if not t.is_infinite(c)]
    return finite[-1] if finite else None


def add_quality_prior(g: FlowGraph, t: Tetrahedralization, params: VisParams) -> None:
    """Add ``quality_weight`` to both arcs of every facet between finite cells."""
    q = params.quality_weight
    if q == 0:
        return
    both = g.finite[:, None] & g.finite[g.neighbors]
    g.face_cap[both] += q


def _dinic(n, s, tsink, edges):
    """Max flow on a graph given as ``(u, v, cap_uv, cap_vu)`` edges.

    Returns ``(flow, residual_reachable_from_source)``.
    """
    head = [[] for _ in range(n)]
    to = []
    cap = []
    for u, v, a, b in edges:
        head[u].append(len(to))
        to.append(v)
        cap.append(float(a))
        head[v].append(len(to))
        to.append(u)
        cap.append(float(b))
    scale = max([abs(c) for c in cap] + [0.0])
    tol = 1e-12 * scale
    flow = 0.0
    while True:
        level = [-1] * n
        level[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for e in head[u]:
                v = to[e]
                if level[v] < 0 and cap[e] > tol:
                    level[v] = level[u] + 1
                    q.append(v)
        if level[tsink] < 0:
            break
        it = [0] * n
        while True:
            # iterative DFS for one augmenting path in the level graph
            path = []
            u = s
            found = False
            while True:
                if u == tsink:
                    found = True
                    break
                adv = False
                hu = head[u]
                while it[u] < len(hu):
                    e = hu[it[u]]
                    v = to[e]
                    if cap[e] > tol and level[v] == level[u] + 1:
                        path.append(e)
                        u = v
                        adv = True
                        break
                    it[u] += 1
                if not adv:
                    if u == s:
                        break
                    level[u] = -1
                    e = path.pop()
                    u = to[e ^ 1]
                    it[u] += 1
            if not found:
                break
            push = min(cap[e] for e in path)
            for e in path:
                cap[e] -= push
                cap[e ^ 1] += push
            flow += push
    seen = [False] * n
    seen[s] = True
    q = deque([s])
    while q:
        u = q.popleft()
        for e in head[u]:
            v = to[e]
            if not seen[v] and cap[e] > tol:
                seen[v] = True
                q.append(v)
    return flow, seen


def cut_value(nodes_free, arcs, src, snk) -> float:
    """Capacity of the cut induced by a node labeling (True = source side)."""
    total = 0.0
    for k, free in enumerate(nodes_free):
        if free:
            total += snk[k]
        else:
            total += src[k]
    for u, v, a, b in arcs:
        if nodes_free[u] and not nodes_free[v]:
            total += a
        elif nodes_free[v] and not nodes_free[u]:
            total += b
    return float(total)


def solve_folded(arcs, src, snk):
    """Min cut of a folded graph; returns (free mask, cut value)."""
    n = len(src)
    s, tsink = n, n + 1
    edges = [(u, v, a, b) for u, v, a, b in arcs]
    for k in range(n):
        if src[k] > 0:
            edges.append((s, k, src[k], 0.0))
        if snk[k] > 0:
            edges.append((k, tsink, snk[k], 0.0))
    _, seen = _dinic(n + 2, s, tsink, edges)
    free = np.array(seen[:n], dtype=bool)
    return free, cut_value(free, arcs, src, snk)


def min_cut(g: FlowGraph, t: Tetrahedralization | None = None):
    """Label cells FREE (source side) or MATTER (sink side).

    Returns ``(labels, cut_value)`` with one label per cell; infinite cells
    are always FREE. If ``t`` is given its labels are overwritten.
    """
    nodes, arcs, src, snk = g.folded()
    free, value = solve_folded(arcs, src, snk)
    labels = np.full(g.n_cells, int(Label.FREE))
    labels[nodes[~free]] = int(Label.MATTER)
    if t is not None:
        t.labels = [Label(int(x)) for x in labels]
    return labels, value


def visibility_graph(t: Tetrahedralization, cameras, samples, params: VisParams,
                     sample_vertices=None) -> FlowGraph:
    """Accumulate every camera-point ray of ``samples`` and the quality prior.

    ``cameras`` maps camera id to an object with a ``center``; each sample has
    ``position`` and ``visibility``.
    """
    sigma = params.sigma if params.sigma is not None else compute_sigma(t)
    params.sigma = sigma
    g = FlowGraph(t)
    centers = {int(k): np.asarray(c.center if hasattr(c, "center") else c, dtype=float)
               for k, c in (cameras.items() if isinstance(cameras, dict) else enumerate(cameras))}
    for k, s in enumerate(samples):
        p = np.asarray(s.position, dtype=float)
        if sample_vertices is not None:
            # ray ends exactly at the merged triangulation vertex
            p = np.asarray(t.vertices[sample_vertices[k]])
        for cid in sorted(s.visibility):
            accumulate_ray(g, t, centers[cid], p, params, sigma)
    add_quality_prior(g, t, params)
    if g.rays_skipped or g.sinks_skipped or g.sinks_clamped:
        # rays ending on a hull vertex seen from outside never enter the hull
        log.info("skipped %d rays outside the hull and %d sink links; clamped %d sink links to the hull",
                 g.rays_skipped, g.sinks_skipped, g.sinks_clamped)
    return g
