from itertools import combinations

import numpy as np
import pytest

from gpm.bench import (CSLSpec, SBMSpec, TreeMatchSpec, closed_walk_counts, gen_csl,
                       gen_random_graph, gen_sbm, gen_tree_match, loglog_slope,
                       majority_baseline, random_hits_baseline, triangle_counts, wl1_refine,
                       wl_indistinguishable)
from gpm.graph import Graph, homophily_ratio
from gpm.train import hits_at_k


def _brute_triangles(g: Graph) -> np.ndarray:
    adj = {v: set(g.neighbors(v).tolist()) for v in range(g.num_nodes)}
    out = np.zeros(g.num_nodes, dtype=int)
    for a, b, c in combinations(range(g.num_nodes), 3):
        if b in adj[a] and c in adj[a] and c in adj[b]:
            out[[a, b, c]] += 1
    return out


def test_csl_structure():
    ds = gen_csl(CSLSpec(copies_per_class=2), seed=0)
    assert len(ds.graphs) == 10
    for g in ds.graphs:
        assert g.num_nodes == 41 and np.all(g.degrees == 4)
    assert [g.graph_label for g in ds.graphs] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]


def test_csl_copies_are_relabelings_of_the_base():
    spec = CSLSpec(copies_per_class=3)
    ds = gen_csl(spec, seed=1)
    for j, g in enumerate(ds.graphs):
        skip = spec.skips[g.graph_label]
        perm = ds.extra["perms"][j]
        got = {tuple(sorted(e)) for e in g.undirected_edges().tolist()}
        want = {tuple(sorted((perm[i], perm[(i + s) % 41]))) for i in range(41)
                for s in (1, skip)}
        assert got == want


def test_triangle_counts_match_brute_force():
    ds = gen_csl(CSLSpec(copies_per_class=1), seed=0)
    for g in ds.graphs[:2]:
        np.testing.assert_array_equal(triangle_counts(g), _brute_triangles(g))
    # skip 2: {i, i+1, i+2} gives three triangles per node; skip 3 has none
    assert set(triangle_counts(ds.graphs[0]).tolist()) == {3}
    assert set(triangle_counts(ds.graphs[1]).tolist()) == {0}


def test_csl_classes_defeat_1wl_but_not_walk_counts():
    ds = gen_csl(CSLSpec(copies_per_class=1), seed=0)
    assert wl_indistinguishable(ds.graphs)
    counts = [tuple(closed_walk_counts(g, 10)) for g in ds.graphs]
    assert len(set(counts)) == 5


def test_wl_separates_triangle_from_path():
    tri = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
    path = Graph.from_edges(3, [(0, 1), (1, 2)])
    assert not wl_indistinguishable([tri, path])
    assert wl1_refine(tri, 2) == wl1_refine(Graph.from_edges(3, [(1, 0), (2, 1), (2, 0)]), 2)
    with pytest.raises(ValueError):
        wl1_refine(tri, 0)


def test_closed_walks_on_triangle():
    tri = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
    # eigenvalues 2, -1, -1
    assert closed_walk_counts(tri, 4) == [0, 6, 6, 18]


def test_csl_spec_validation():
    with pytest.raises(ValueError):
        gen_csl(CSLSpec(skips=(2, 2)))
    with pytest.raises(ValueError):
        gen_csl(CSLSpec(n=10, skips=(2, 5)))
    # multiplying by 3^-1 = -4 (mod 13) maps skip 3 onto skip 4
    with pytest.raises(ValueError):
        gen_csl(CSLSpec(n=13, skips=(3, 4), copies_per_class=1))


def test_tree_match_shape():
    ds = gen_tree_match(TreeMatchSpec(radius=2, examples=5), seed=0)
    for g in ds.graphs:
        assert g.num_nodes == 7 and g.num_edges == 6
        assert int((g.degrees == 1).sum()) == 4
        assert g.node_labels[0] >= 0 and np.all(g.node_labels[1:] == -1)


def test_tree_match_root_label_rule():
    spec = TreeMatchSpec(radius=3, examples=50)
    ds = gen_tree_match(spec, seed=2)
    L, C = 8, spec.num_labels
    for g, y in zip(ds.graphs, ds.extra["labels"]):
        x = g.node_features
        root_key = int(np.argmax(x[0, :L]))
        leaves = np.flatnonzero(g.degrees == 1)
        match = [v for v in leaves if x[v, root_key] == 1.0]
        assert len(match) == 1
        assert int(np.argmax(x[match[0], L:L + C])) == y == g.node_labels[0]


def test_tree_match_degree_variant():
    ds = gen_tree_match(TreeMatchSpec(radius=2, examples=10, variant="degree"), seed=0)
    for g, y in zip(ds.graphs, ds.extra["labels"]):
        root_key = g.degree(0) - 2 - 1
        # pendant leaves hang off the original leaves 3..6
        leaf_keys = {v: g.degree(v) - 1 - 1 for v in range(3, 7)}
        owner = [v for v, key in leaf_keys.items() if key == root_key]
        assert len(owner) == 1
        assert int(np.argmax(g.node_features[owner[0]])) == y


def test_tree_match_class_balance():
    ds = gen_tree_match(TreeMatchSpec(radius=2, examples=1000), seed=0)
    freq = np.bincount(ds.extra["labels"], minlength=4) / 1000
    assert np.all(np.abs(freq - 0.25) <= 0.05)


def test_generators_are_deterministic():
    a = gen_tree_match(TreeMatchSpec(radius=2, examples=10), seed=3).manifest()
    b = gen_tree_match(TreeMatchSpec(radius=2, examples=10), seed=3).manifest()
    c = gen_tree_match(TreeMatchSpec(radius=2, examples=10), seed=4).manifest()
    assert a == b and a["dataset_hash"] != c["dataset_hash"]
    assert gen_sbm(seed=1).content_hash() == gen_sbm(seed=1).content_hash()


def test_sbm_extremes():
    g = gen_sbm(SBMSpec(blocks=3, nodes_per_block=5, p_in=1.0, p_out=0.0), seed=0)
    assert np.all(g.degrees == 4) and g.num_edges == 3 * 10
    assert homophily_ratio(g, g.node_labels) == 1.0
    for seed in range(5):
        g = gen_sbm(SBMSpec(blocks=4, nodes_per_block=100, p_in=0.05, p_out=0.05), seed=seed)
        assert homophily_ratio(g, g.node_labels) == pytest.approx(0.25, abs=0.05)


def test_random_graph_has_no_isolated_nodes():
    g = gen_random_graph(500, 4.0, seed=0)
    assert np.all(g.degrees >= 2)


def test_majority_and_slope():
    assert majority_baseline(np.array([0, 1, 1, 2])) == 0.5
    xs = np.array([10.0, 20.0, 40.0])
    assert loglog_slope(xs, 3 * xs ** 2) == pytest.approx(2.0)


def test_random_hits_baseline_matches_simulation():
    rng = np.random.default_rng(0)
    N, k, trials = 50, 5, 4000
    sims = [hits_at_k(rng.random(20), rng.random(N), k) for _ in range(trials)]
    assert np.mean(sims) == pytest.approx(random_hits_baseline(N, k), abs=0.01)
