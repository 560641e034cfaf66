import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadgraph.graph import (
    RoadGraph,
    TopologyLabel,
    Triplet,
    binarize_adjacency,
    from_triplets,
    graph_close,
    reachable,
    to_triplets,
)


def full(n, value):
    a = np.full((n, n), value)
    np.fill_diagonal(a, 0)
    return a


def star5():
    nodes = [(0.5, 0.02), (0.98, 0.5), (0.5, 0.98), (0.02, 0.5), (0.5, 0.5)]
    return RoadGraph.from_edges(nodes, [(k, 4) for k in range(4)])


@st.composite
def graphs(draw, max_nodes=7):
    n = draw(st.integers(0, max_nodes))
    coord = st.integers(0, 1000).map(lambda v: v / 1000)
    nodes = draw(st.lists(st.tuples(coord, coord), min_size=n, max_size=n, unique=True))
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            a[i, j] = a[j, i] = draw(st.sampled_from([0.0, 0.2, 0.7, 1.0]))
    return RoadGraph(np.array(nodes).reshape(-1, 2), a)


def test_binarize_examples():
    g = RoadGraph(np.random.default_rng(0).random((4, 2)), full(4, 0.6))
    assert np.array_equal(binarize_adjacency(g, 0.5).adjacency, full(4, 1.0))
    g = RoadGraph(g.nodes, full(4, 0.4))
    assert not binarize_adjacency(g, 0.5).adjacency.any()
    a = np.array([[0, 0.2, 0.9], [0.2, 0, 0.9], [0.9, 0.9, 0]])
    b = binarize_adjacency(RoadGraph(np.zeros((3, 2)), a)).adjacency
    assert b.tolist() == [[0, 0, 1], [0, 0, 1], [1, 1, 0]]


def test_binarize_rejects_bad_threshold():
    with pytest.raises(ValueError):
        binarize_adjacency(star5(), 1.0)


@given(graphs())
def test_binarize_keeps_symmetry_and_zero_diagonal(g):
    b = binarize_adjacency(g).adjacency
    assert np.array_equal(b, b.T)
    assert not np.diag(b).any()
    assert set(np.unique(b)) <= {0.0, 1.0}


def test_to_triplets_examples():
    two = RoadGraph.from_edges([(0.1, 0.1), (0.9, 0.9)], [(0, 1)])
    assert len(to_triplets(two)) == 1
    assert len(to_triplets(star5())) == 4
    assert to_triplets(RoadGraph(np.random.default_rng(1).random((6, 2)), np.zeros((6, 6)))) == set()


def test_triplet_is_unordered():
    assert Triplet((0.1, 0.2), (0.3, 0.4)) == Triplet((0.3, 0.4), (0.1, 0.2))
    assert len({Triplet((0.1, 0.2), (0.3, 0.4)), Triplet((0.3, 0.4), (0.1, 0.2))}) == 1


@given(graphs())
def test_triplet_count_matches_upper_triangle(g):
    assert len(to_triplets(g)) == int(np.triu(g.adjacency >= 0.5, 1).sum())


@given(graphs())
def test_triplets_roundtrip_is_idempotent(g):
    once = to_triplets(g)
    assert to_triplets(from_triplets(once)) == once


def test_reachable_examples():
    chain = RoadGraph.from_edges(np.zeros((3, 2)), [(0, 1), (1, 2)])
    assert reachable(chain, {0}, {2})
    pairs = RoadGraph.from_edges(np.zeros((4, 2)), [(0, 1), (2, 3)])
    assert not reachable(pairs, {0, 1}, {2, 3})
    assert reachable(pairs, {0, 2}, {2})
    with pytest.raises(IndexError):
        reachable(pairs, {0}, {4})


@given(graphs(), st.data())
def test_reachable_monotone_under_edge_addition(g, data):
    if g.num_nodes < 2:
        return
    idx = st.integers(0, g.num_nodes - 1)
    src, dst = {data.draw(idx)}, {data.draw(idx)}
    i, j = data.draw(idx), data.draw(idx)
    before = reachable(g, src, dst)
    a = g.adjacency.copy()
    if i != j:
        a[i, j] = a[j, i] = 1.0
    assert reachable(RoadGraph(g.nodes, a), src, dst) >= before


def test_graph_close_examples():
    g = star5()
    assert graph_close(g, g, 0.0)
    perm = np.array([4, 2, 0, 3, 1])
    permuted = RoadGraph(g.nodes[perm], g.adjacency[np.ix_(perm, perm)])
    assert graph_close(g, permuted, 1e-9)
    cut = g.adjacency.copy()
    cut[0, 4] = cut[4, 0] = 0
    assert not graph_close(g, RoadGraph(g.nodes, cut), 0.01)


def test_graph_close_needs_consistent_bijection():
    # two nodes swap within tolerance; edges must follow the swap
    a = RoadGraph.from_edges([(0.5, 0.5), (0.51, 0.5), (0.9, 0.9)], [(0, 2)])
    b = RoadGraph.from_edges([(0.51, 0.5), (0.5, 0.5), (0.9, 0.9)], [(0, 2)])
    assert graph_close(a, b, 0.02)
    assert not graph_close(a, b, 0.001)


@settings(max_examples=50)
@given(graphs(), graphs())
def test_graph_close_symmetric_reflexive(a, b):
    assert graph_close(a, a, 0.0)
    assert graph_close(a, b, 0.05) == graph_close(b, a, 0.05)


@given(graphs())
def test_json_roundtrip(g):
    back = RoadGraph.from_json(g.to_json())
    assert graph_close(binarize_adjacency(g), binarize_adjacency(back), 0.0)
    assert back.to_json() == g.to_json()


def test_json_edges_are_row_major():
    g = RoadGraph.from_edges(np.zeros((4, 2)), [(3, 1), (2, 0), (1, 0)])
    assert g.to_json(with_scores=False)["edges"] == [[0, 1], [0, 2], [1, 3]]


def test_validate():
    g = star5()
    g.validate()
    bad = g.adjacency.copy()
    bad[0, 4] = 0.3
    with pytest.raises(ValueError):
        RoadGraph(g.nodes, bad).validate()


def test_topology_label_encoding():
    assert TopologyLabel.from_access(True, True, True) is TopologyLabel.CROSSROAD
    assert TopologyLabel.from_access(False, True, False) is TopologyLabel.FRONT
    assert len(TopologyLabel) == 9
    for lab in TopologyLabel:
        if lab is not TopologyLabel.EMPTY:
            assert TopologyLabel.from_access(*lab.access()) is lab
