"""Per-facet camera pair assignment by MRF labeling.

Candidate pairs link each camera to the two cameras it shares the most
points with. A facet scores a pair by how often the pair's cameras occur in
the (repeated) visibility of its three vertices; a Potts term keeps
neighboring facets on the same pair. The labeling is found by ICM.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .mesh import SurfaceMesh

log = logging.getLogger(__name__)

EMPTY_SENTINEL = 5e8
DEFAULT_FLOOR_BASE = 1e-3


def canonical(i: int, j: int) -> tuple[int, int]:
    i, j = int(i), int(j)
    if i == j:
        raise ValueError("a camera pair needs two distinct cameras")
    return (i, j) if i < j else (j, i)


def covisibility(samples, n_cameras: int) -> np.ndarray:
    """Shared-point counts between cameras."""
    C = np.zeros((n_cameras, n_cameras), dtype=np.int64)
    for s in samples:
        ids = sorted(s.visibility)
        for a in ids:
            if not 0 <= a < n_cameras:
                raise ValueError(f"camera id {a} outside the rig")
        for x in range(len(ids)):
            for y in range(x + 1, len(ids)):
                C[ids[x], ids[y]] += 1
                C[ids[y], ids[x]] += 1
    return C


def build_candidates(samples, n_cameras: int, per_camera: int = 2) -> list[tuple[int, int]]:
    """Each camera pairs with its ``per_camera`` best point-sharing partners.

    Ties prefer the lower camera id. Cameras sharing no point are skipped.
    """
    if n_cameras < 2:
        raise ValueError("need at least two cameras")
    C = covisibility(samples, n_cameras)
    pairs = set()
    for i in range(n_cameras):
        order = sorted((j for j in range(n_cameras) if j != i and C[i, j] > 0),
                       key=lambda j: (-C[i, j], j))
        if not order:
            log.warning("camera %d shares no point with any other camera", i)
            continue
        for j in order[:per_camera]:
            pairs.add(canonical(i, j))
    return sorted(pairs)


def vertex_visibility(mesh: SurfaceMesh, samples, input_to_vertex) -> list[frozenset]:
    """Camera sets of mesh vertices from the samples merged into them.

    Vertices without a triangulation id (split centroids, duplicates) get
    an empty set.
    """
    per_tvertex = {}
    for k, s in enumerate(samples):
        tv = int(input_to_vertex[k])
        per_tvertex.setdefault(tv, set()).update(s.visibility)
    return [frozenset(per_tvertex.get(int(tv), ())) if tv >= 0 else frozenset()
            for tv in mesh.vertex_ids]


def facet_visibility(mesh: SurfaceMesh, vis) -> list[Counter]:
    """Multiset of cameras seeing each facet's vertices, repetitions kept."""
    out = []
    for tri in mesh.faces:
        c = Counter()
        for v in tri:
            c.update(vis[int(v)])
        out.append(c)
    return out


def occurrence_ratio(nu: Counter, pair) -> float:
    """``(count(a) + count(b)) / |nu|``, zero when either camera is absent."""
    a, b = pair
    size = sum(nu.values())
    if size == 0 or nu.get(a, 0) == 0 or nu.get(b, 0) == 0:
        return 0.0
    return (nu[a] + nu[b]) / size


def unary_floor(nus, candidates) -> float:
    """Half the smallest nonzero in-candidate ratio over all facets.

    Taken over every (facet, candidate) combination so the floor stays
    strictly below any nonzero candidate score.
    """
    best = math.inf
    for nu in nus:
        for l in candidates:
            r = occurrence_ratio(nu, l)
            if 0 < r < best:
                best = r
    if best == math.inf:
        return DEFAULT_FLOOR_BASE
    return 0.5 * best


def unary(nu: Counter, pair, candidates, floor: float) -> float:
    if sum(nu.values()) == 0:
        return EMPTY_SENTINEL
    if tuple(pair) not in set(map(tuple, candidates)):
        return floor
    r = occurrence_ratio(nu, pair)
    return r if r > 0 else floor


@dataclass(frozen=True)
class Potts:
    same: float = 0.9
    diff: float = 0.1

    @classmethod
    def literal(cls) -> "Potts":
        """Swapped costs, which reward label changes."""
        return cls(same=0.1, diff=0.9)

    def __call__(self, la, lb) -> float:
        return self.same if la == lb else self.diff


def unary_table(nus, candidates):
    """``(phi, floor)`` with ``phi[f, k]`` the score of candidate ``k`` on facet ``f``."""
    floor = unary_floor(nus, candidates)
    phi = np.array([[unary(nu, l, candidates, floor) for l in candidates] for nu in nus],
                   dtype=float).reshape(len(nus), len(candidates))
    return phi, floor


def mrf_energy(cost, edges, labels, pair_cost) -> float:
    """``sum cost[f, l_f] + sum pair_cost[l_f == l_g]`` (costs are -log values)."""
    labels = np.asarray(labels)
    e = float(cost[np.arange(len(labels)), labels].sum())
    for f, g in edges:
        e += pair_cost[0] if labels[f] == labels[g] else pair_cost[1]
    return e


def icm(cost, edges, pair_cost, init=None, max_sweeps: int = 50):
    """Iterated conditional modes over an (F, L) cost table.

    ``pair_cost = (same, diff)`` are the Potts costs. Facets are visited in
    ascending order; a label changes only if it strictly lowers the local
    energy. Returns ``(labels, energy, trace)`` where ``trace`` holds the
    energy after initialization and after every sweep.
    """
    cost = np.asarray(cost, dtype=float)
    F, L = cost.shape
    if L == 0:
        raise ValueError("empty label set")
    labels = np.argmin(cost, axis=1) if init is None else np.array(init, dtype=np.int64)
    nbrs = [[] for _ in range(F)]
    for f, g in edges:
        nbrs[f].append(g)
        nbrs[g].append(f)
    same, diff = pair_cost
    scale = max(1.0, float(np.max(np.abs(cost))) if cost.size else 1.0)
    tol = 1e-12 * scale
    trace = [mrf_energy(cost, edges, labels, pair_cost)]
    for _ in range(max_sweeps):
        changed = False
        for f in range(F):
            local = cost[f].copy()
            for g in nbrs[f]:
                local += np.where(np.arange(L) == labels[g], same, diff)
            k = int(np.argmin(local))
            if local[k] < local[labels[f]] - tol:
                labels[f] = k
                changed = True
        trace.append(mrf_energy(cost, edges, labels, pair_cost))
        if not changed:
            break
    return labels, trace[-1], trace


@dataclass
class PairAssignment:
    """Lookup table facet -> camera pair, plus the solver record."""

    candidates: list
    labels: np.ndarray
    energy: float
    trace: list = field(default_factory=list)
    empty: np.ndarray = None

    def pair_of(self, f: int) -> tuple[int, int]:
        return tuple(self.candidates[int(self.labels[f])])

    def as_pairs(self) -> list[tuple[int, int]]:
        return [tuple(self.candidates[k]) for k in self.labels]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["facet", "cam_i", "cam_j"])
        for f, k in enumerate(self.labels):
            i, j = self.candidates[int(k)]
            w.writerow([f, i, j])
        return buf.getvalue()

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sweep", "energy"])
        for k, e in enumerate(self.trace):
            w.writerow([k, repr(float(e))])
        return buf.getvalue()


def facets_for_pair(a: PairAssignment, pair) -> list[int]:
    pair = canonical(*pair)
    try:
        k = [tuple(c) for c in a.candidates].index(pair)
    except ValueError:
        return []
    return np.flatnonzero(a.labels == k).tolist()


def facet_groups(a: PairAssignment) -> dict:
    """Facet lists of every used pair, pairs in candidate order."""
    return {tuple(a.candidates[k]): np.flatnonzero(a.labels == k).tolist()
            for k in range(len(a.candidates)) if np.any(a.labels == k)}


def smoothed_normals(mesh: SurfaceMesh, rounds: int = 3) -> np.ndarray:
    """Facet normals averaged over the neighborhood grown by ``rounds`` vertex rings."""
    F = mesh.faces
    nv = mesh.n_vertices
    N = mesh.normals() * mesh.areas()[:, None]
    for _ in range(rounds):
        vn = np.zeros((nv, 3))
        for k in range(3):
            np.add.at(vn, F[:, k], N)
        N = vn[F].sum(axis=1)
    norm = np.linalg.norm(N, axis=1, keepdims=True)
    return N / np.where(norm > 0, norm, 1.0)


def view_cosines(mesh: SurfaceMesh, cameras, candidates, smoothing: int = 3) -> np.ndarray:
    """``(F, L)`` smaller cosine between the (smoothed) facet normal and the two view directions."""
    N = smoothed_normals(mesh, smoothing)
    C = mesh.vertices[mesh.faces].mean(axis=1)
    by_id = {c.id: c for c in cameras}
    out = np.empty((mesh.n_faces, len(candidates)))
    for k, (a, b) in enumerate(candidates):
        cos = []
        for cid in (a, b):
            d = by_id[cid].center - C
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            cos.append(np.einsum("ij,ij->i", d, N))
        out[:, k] = np.minimum(cos[0], cos[1])
    return out


def tie_break_costs(cost: np.ndarray, preference: np.ndarray) -> np.ndarray:
    """Order exactly tied unary costs by ``preference`` (higher is better).

    The added offset stays below a quarter of the smallest gap between
    distinct costs, so it never reverses a strict difference.
    """
    vals = np.unique(cost[np.isfinite(cost)])
    gaps = np.diff(vals)
    gap = float(gaps.min()) if len(gaps) else 1.0
    pref = np.clip(np.nan_to_num(preference, nan=-1.0), -1.0, 1.0)
    return cost + 0.25 * gap * (1.0 - pref) / 2.0


def select_pairs(mesh: SurfaceMesh, vis, candidates, potts: Potts = Potts(),
                 max_sweeps: int = 50, cameras=None) -> PairAssignment:
    """Assign a candidate pair to every facet of ``mesh``.

    With ``cameras`` given, candidates with exactly equal scores on a facet
    are ordered by how squarely both cameras view it (see
    :func:`tie_break_costs`); without, ties go to the smallest pair.
    """
    if not candidates:
        raise ValueError("empty candidate set")
    candidates = sorted(canonical(*c) for c in candidates)
    nus = facet_visibility(mesh, vis)
    phi, _ = unary_table(nus, candidates)
    cost = -np.log(phi)
    if cameras is not None:
        cost = tie_break_costs(cost, view_cosines(mesh, cameras, candidates))
    edges = mesh.face_adjacency()
    pair_cost = (-math.log(potts.same), -math.log(potts.diff))
    labels, energy, trace = icm(cost, edges, pair_cost, max_sweeps=max_sweeps)
    empty = np.array([sum(nu.values()) == 0 for nu in nus], dtype=bool)
    return PairAssignment(candidates, labels, energy, trace, empty)
