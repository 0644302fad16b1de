import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from facetmvs.delaunay import Label, Tetrahedralization
from facetmvs.graphcut import (FlowGraph, VisParams, compute_sigma, cut_value, facet_weight, min_cut,
                               percentile_nearest_rank, solve_folded, visibility_graph)


@st.composite
def node_graphs(draw):
    n = draw(st.integers(1, 15))
    cap = st.integers(0, 50)
    arcs = []
    for u in range(n):
        for v in range(u + 1, n):
            if draw(st.booleans()):
                arcs.append((u, v, float(draw(cap)), float(draw(cap))))
    src = np.array([draw(cap) for _ in range(n)], float)
    snk = np.array([draw(cap) for _ in range(n)], float)
    return arcs, src, snk


def scipy_max_flow(arcs, src, snk):
    n = len(src)
    s, t = n, n + 1
    M = np.zeros((n + 2, n + 2), dtype=np.int64)
    for u, v, a, b in arcs:
        M[u, v] += int(a)
        M[v, u] += int(b)
    M[s, :n] += src.astype(np.int64)
    M[:n, t] += snk.astype(np.int64)
    return maximum_flow(csr_matrix(M), s, t).flow_value


@given(node_graphs())
def test_min_cut_equals_independent_max_flow(g):
    arcs, src, snk = g
    free, value = solve_folded(arcs, src, snk)
    assert value == scipy_max_flow(arcs, src, snk)
    # the returned labeling realizes the reported value
    assert cut_value(free, arcs, src, snk) == value


@given(node_graphs(), st.integers(0, 2 ** 15 - 1))
def test_no_labeling_beats_the_cut(g, mask):
    arcs, src, snk = g
    _, value = solve_folded(arcs, src, snk)
    labels = [(mask >> k) & 1 == 1 for k in range(len(src))]
    assert cut_value(labels, arcs, src, snk) >= value


def test_isolated_node_follows_its_stronger_link():
    free, _ = solve_folded([], np.array([5.0, 1.0]), np.array([1.0, 5.0]))
    assert free.tolist() == [True, False]


def test_folding_sends_infinite_arcs_to_source(rng):
    t = Tetrahedralization.build(rng.random((20, 3)))
    g = FlowGraph(t)
    c = t.infinite_cells()[0]
    i = t.cells[c].index(-1)
    inner = t.neighbors[c][i]
    # the arc leaving the infinite cell towards its finite neighbor
    g.face_cap[c, i] = 7.0
    nodes, arcs, src, snk = g.folded()
    pos = int(np.flatnonzero(nodes == inner)[0])
    assert src[pos] == 7.0
    assert len(nodes) == len(t.finite_cells())
    labels, _ = min_cut(g, t)
    assert all(labels[c] == Label.FREE for c in t.infinite_cells())


def test_facet_weight():
    s = 0.5
    assert facet_weight(0.0, s) == 0.0
    ds = np.linspace(0, 5, 50)
    w = [facet_weight(d, s) for d in ds]
    assert all(b >= a for a, b in zip(w, w[1:])) and w[-1] < 1.0 + 1e-15
    assert math.isclose(facet_weight(s, s), 1 - math.exp(-0.5))
    assert facet_weight(1.0, s, "literal") == 0.0 and facet_weight(0.0, s, "literal") == 0.0


def test_percentile_nearest_rank():
    v = [15, 20, 35, 40, 50]
    assert percentile_nearest_rank(v, 30) == 20
    assert percentile_nearest_rank(v, 40) == 20
    assert percentile_nearest_rank(v, 50) == 35
    assert percentile_nearest_rank(v, 100) == 50
    assert percentile_nearest_rank(v, 0) == 15
    with pytest.raises(ValueError):
        percentile_nearest_rank([], 25)


def test_sigma_is_quarter_percentile_of_edges(rng):
    t = Tetrahedralization.build(rng.random((30, 3)))
    L = np.sort(t.edge_lengths())
    assert compute_sigma(t) == L[math.ceil(0.25 * len(L)) - 1]


def test_vis_params_validation():
    with pytest.raises(ValueError):
        VisParams(alpha_vis=0)
    with pytest.raises(ValueError):
        VisParams(quality_weight=-1)
    with pytest.raises(ValueError):
        VisParams(weight_mode="other")


def test_visibility_graph_carves_around_the_surface(small_scene):
    b = small_scene
    t = Tetrahedralization.build(b.points)
    g = visibility_graph(t, {c.id: c for c in b.cameras}, b.samples, VisParams(),
                         sample_vertices=t.input_to_vertex)
    assert np.all(g.face_cap >= 0) and np.all(g.source_cap >= 0) and np.all(g.sink_cap >= 0)
    n_rays = sum(len(s.visibility) for s in b.samples)
    assert g.sink_cap.sum() <= 32.0 * n_rays + 1e-9
    labels, value = min_cut(g, t)
    assert value > 0
    # cells well inside the unit sphere end up as matter
    inner = [c for c in t.finite_cells() if np.linalg.norm(np.mean(t.cell_points(c), axis=0)) < 0.6]
    assert inner and np.mean([labels[c] == Label.MATTER for c in inner]) > 0.9


def test_quality_prior_adds_to_finite_facets(rng):
    t = Tetrahedralization.build(rng.random((15, 3)))
    from facetmvs.graphcut import add_quality_prior
    g = FlowGraph(t)
    add_quality_prior(g, t, VisParams(quality_weight=2.0))
    both = g.finite[:, None] & g.finite[g.neighbors]
    assert np.all(g.face_cap[both] == 2.0) and np.all(g.face_cap[~both] == 0.0)
