import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial import ConvexHull, Delaunay

from facetmvs.delaunay import INF, DelaunayError, Label, Tetrahedralization
from facetmvs.geometry import orient3d
from facetmvs.validation import delaunay_violations


def cell_set(t):
    return {frozenset(t.cells[c]) for c in t.finite_cells()}


def test_matches_qhull_on_generic_points(rng):
    pts = rng.random((120, 3))
    t = Tetrahedralization.build(pts, seed=1)
    q = Delaunay(pts)
    assert cell_set(t) == {frozenset(s.tolist()) for s in q.simplices}


def test_volume_equals_convex_hull(rng):
    pts = rng.normal(size=(200, 3))
    t = Tetrahedralization.build(pts)
    assert np.isclose(t.volume(), ConvexHull(pts).volume, rtol=1e-10)


def test_insertion_order_does_not_change_generic_result(rng):
    pts = rng.random((80, 3))
    assert cell_set(Tetrahedralization.build(pts, seed=0)) == cell_set(Tetrahedralization.build(pts, seed=9))


def test_same_seed_is_reproducible(rng):
    pts = rng.random((60, 3))
    a, b = Tetrahedralization.build(pts, seed=3), Tetrahedralization.build(pts, seed=3)
    assert a.dump_ascii() == b.dump_ascii()


lattice_points = arrays(np.float64, st.tuples(st.integers(5, 40), st.just(3)),
                        elements=st.integers(-3, 3).map(float))


@given(lattice_points)
def test_degenerate_inputs_give_valid_delaunay(pts):
    uniq = np.unique(pts, axis=0)
    if len(uniq) < 4 or np.linalg.matrix_rank(uniq[1:] - uniq[0]) < 3:
        with pytest.raises(DelaunayError):
            Tetrahedralization.build(pts)
        return
    t = Tetrahedralization.build(pts)
    t.check_adjacency()
    assert delaunay_violations(t) == []
    # duplicates are merged onto a single vertex at the same coordinates
    assert t.n_vertices == len(uniq)
    assert np.array_equal(t.points[t.input_to_vertex], pts)


def test_every_finite_cell_is_positively_oriented(rng):
    t = Tetrahedralization.build(rng.random((50, 3)))
    for c in t.finite_cells():
        assert orient3d(*t.cell_points(c)) != 0


def test_infinite_cells_cover_the_hull(rng):
    pts = rng.random((40, 3))
    t = Tetrahedralization.build(pts)
    assert len(t.infinite_cells()) == len(ConvexHull(pts).simplices)
    assert all(t.labels[c] == Label.FREE for c in t.infinite_cells())


def test_near_duplicates_merge_within_tolerance():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1e-14, 0, 0], [1, 1, 1]], float)
    t = Tetrahedralization.build(pts)
    assert t.input_to_vertex[4] == t.input_to_vertex[0]
    assert t.n_vertices == 5


@pytest.mark.parametrize("pts", [np.zeros((3, 3)), np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float),
                                 np.array([[0, 0, np.nan], [1, 0, 0], [0, 1, 0], [0, 0, 1]]), np.zeros((5, 2))])
def test_rejects_bad_input(pts):
    with pytest.raises(DelaunayError):
        Tetrahedralization.build(pts)


def test_locate(rng):
    pts = rng.random((60, 3))
    t = Tetrahedralization.build(pts)
    for p in rng.random((30, 3)) * 0.5 + 0.25:
        c = t.locate(p)
        if c is None:
            continue
        P = t.cell_points(c)
        for i in range(4):
            q = list(P)
            q[i] = tuple(p)
            assert orient3d(*q) >= 0
    assert t.locate((5.0, 5.0, 5.0)) is None
    # a vertex is located in an incident cell
    c = t.locate(pts[0])
    assert t.input_to_vertex[0] in t.cells[c]


def test_walk_ray_is_a_connected_monotone_path(rng):
    pts = rng.random((80, 3))
    t = Tetrahedralization.build(pts)
    walk = t.walk_ray((0.3, 0.3, 0.3), (0.7, 0.6, 0.65))
    assert not walk.empty
    ts = [tp for _, _, tp in walk.crossings]
    assert ts == sorted(ts) and all(0 <= x <= 1 for x in ts)
    for k, (prev, face, _) in enumerate(walk.crossings):
        assert walk.cells[k] == prev
        assert t.neighbors[prev][face] == walk.cells[k + 1]


def test_walk_ray_through_vertex_is_perturbed():
    g = np.stack(np.meshgrid(*[np.arange(3.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    t = Tetrahedralization.build(g)
    walk = t.walk_ray((0.1, 0.1, 0.1), (2.0, 2.0, 2.0))
    assert not walk.empty


def test_walk_from_outside_enters_the_hull(rng):
    t = Tetrahedralization.build(rng.random((40, 3)))
    walk = t.walk_ray((-3.0, 0.5, 0.5), (0.5, 0.5, 0.5))
    assert not walk.empty
    assert INF not in t.cells[walk.cells[-1]]


def test_centroid_split_preserves_volume_and_adjacency(rng):
    t = Tetrahedralization.build(rng.random((30, 3)))
    t.labels = [Label.FREE if INF in vs else Label.MATTER for vs in t.cells]
    vol = t.volume()
    c = t.finite_cells()[0]
    ids = t.centroid_split(c)
    t.check_adjacency()
    assert len(ids) == 4 and all(t.labels[i] == Label.MATTER for i in ids)
    assert np.isclose(t.volume(), vol, rtol=1e-12)
    with pytest.raises(ValueError):
        t.centroid_split(t.infinite_cells()[0])


def test_incident_cells_match_brute_force(rng):
    t = Tetrahedralization.build(rng.random((40, 3)))
    for v in range(0, t.n_vertices, 7):
        brute = {c for c in range(t.n_cells) if v in t.cells[c]}
        assert t.incident_cells(v) == brute
