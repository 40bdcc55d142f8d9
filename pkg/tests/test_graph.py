import json
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpm.graph import (Graph, GraphBatch, GraphFormatError, degree, dump_graphs, ego_graph,
                       homophily_ratio, load_graph, neighbors)

TRIANGLE = [(0, 1), (1, 2), (2, 0)]


def test_single_edge_degrees():
    g = Graph.from_edges(2, [(0, 1)])
    assert g.degrees.tolist() == [1, 1]


def test_triangle_all_degree_two():
    g = Graph.from_edges(3, TRIANGLE)
    assert g.num_nodes == 3
    assert g.degrees.tolist() == [2, 2, 2]


def test_one_directional_arc_rejected_without_symmetrize():
    with pytest.raises(GraphFormatError):
        Graph.from_arcs(2, [(0, 1)], symmetrize=False)
    g = Graph.from_arcs(2, [(0, 1)], symmetrize=True)
    assert g.num_edges == 1


def test_self_loop_needs_flag():
    with pytest.raises(GraphFormatError):
        Graph.from_edges(2, [(0, 0), (0, 1)])
    g = Graph.from_edges(2, [(0, 0), (0, 1)], allow_self_loops=True)
    assert 0 in g.neighbors(0).tolist()


def test_feature_row_mismatch():
    with pytest.raises(GraphFormatError):
        Graph.from_edges(3, TRIANGLE, node_features=np.ones((2, 4)))


def test_degree_examples():
    tri = Graph.from_edges(3, TRIANGLE)
    star = Graph.from_edges(4, [(0, 1), (0, 2), (0, 3)])
    iso = Graph.from_edges(3, [(0, 1)])
    assert degree(tri, 0) == 2
    assert degree(star, 0) == 3
    assert degree(iso, 2) == 0
    with pytest.raises(IndexError):
        degree(tri, 3)


def test_neighbors_examples():
    assert neighbors(Graph.from_edges(3, TRIANGLE), 0).tolist() == [1, 2]
    assert neighbors(Graph.from_edges(3, [(0, 1), (1, 2)]), 1).tolist() == [0, 2]
    assert neighbors(Graph.from_edges(3, [(0, 1)]), 2).tolist() == []


def test_homophily_examples():
    assert homophily_ratio(Graph.from_edges(2, [(0, 1)]), [0, 0]) == 1.0
    assert homophily_ratio(Graph.from_edges(3, TRIANGLE), [0, 0, 1]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        homophily_ratio(Graph.from_edges(3, TRIANGLE), [0, 1])


def _bfs(edges, n, src, radius):
    adj = {v: set() for v in range(n)}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for w in adj[u]:
            if w not in dist:
                dist[w] = dist[u] + 1
                q.append(w)
    return {v for v, d in dist.items() if d <= radius}


def test_ego_graph_examples():
    path = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    sub, nodes = ego_graph(path, 0, 0)
    assert sub.num_nodes == 1 and sub.num_edges == 0
    sub, nodes = ego_graph(path, 0, 1)
    assert sorted(nodes.tolist()) == [0, 1] and sub.num_edges == 1

    edges = TRIANGLE + [(0, 3)]
    g = Graph.from_edges(4, edges)
    sub, nodes = ego_graph(g, 0, 1)
    keep = _bfs(edges, 4, 0, 1)
    assert set(nodes.tolist()) == keep
    induced = {frozenset(e) for e in edges if set(e) <= keep}
    got = {frozenset((int(nodes[u]), int(nodes[v]))) for u, v in sub.undirected_edges()}
    assert got == induced


def test_json_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    g = Graph.from_edges(3, TRIANGLE, node_features=rng.standard_normal((3, 2)),
                         node_labels=[0, 1, 1])
    dump_graphs(g, tmp_path / "g.json")
    back = load_graph(tmp_path / "g.json")
    assert back.content_hash() == g.content_hash()
    np.testing.assert_array_equal(back.node_features, g.node_features)


def test_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(GraphFormatError):
        load_graph(bad)
    asym = tmp_path / "asym.json"
    asym.write_text(json.dumps({"num_nodes": 2, "edges": [[0, 1]]}), encoding="utf-8")
    with pytest.raises(GraphFormatError):
        load_graph(asym)
    assert load_graph(asym, symmetrize=True).num_edges == 1


def test_batch_offsets():
    a = Graph.from_edges(3, TRIANGLE, graph_label=0)
    b = Graph.from_edges(2, [(0, 1)], graph_label=1)
    batch = GraphBatch.from_graphs([a, b])
    assert batch.offsets.tolist() == [0, 3, 5]
    assert batch.union.neighbors(3).tolist() == [4]
    assert batch.graph_labels.tolist() == [0, 1]


@st.composite
def random_graphs(draw):
    n = draw(st.integers(1, 12))
    pairs = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=30))
    edges = [(u, v) for u, v in pairs if u != v]
    labels = draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
    return Graph.from_edges(n, edges), labels


@settings(max_examples=60, deadline=None)
@given(random_graphs())
def test_degree_and_edge_invariants(data):
    g, _ = data
    for v in range(g.num_nodes):
        assert g.degree(v) == len(g.neighbors(v))
    assert int(g.degrees.sum()) == 2 * g.num_edges


@settings(max_examples=60, deadline=None)
@given(random_graphs(), st.randoms(use_true_random=False))
def test_homophily_permutation_invariant(data, rnd):
    g, labels = data
    perm = list(range(g.num_nodes))
    rnd.shuffle(perm)
    perm = np.array(perm)
    edges = perm[g.undirected_edges()] if g.num_edges else np.zeros((0, 2), int)
    moved = Graph.from_edges(g.num_nodes, edges)
    new_labels = np.empty(g.num_nodes, int)
    new_labels[perm] = labels
    assert homophily_ratio(moved, new_labels) == pytest.approx(homophily_ratio(g, labels))
