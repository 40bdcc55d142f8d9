import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpm.graph import Graph, GraphBatch, InstanceKind, InstanceRef
from gpm.tokenizer import (PAD, BiasParams, PatternCache, anonymize, anonymize_batch,
                           loop_adjacency, loop_adjacency_batch, presample, sample_walk,
                           subsample, tokenize_instance, walk_many)

TRIANGLE = Graph.from_edges(3, [(0, 1), (1, 2), (2, 0)])


def first_occurrence_oracle(seq):
    seen = []
    out = []
    for v in seq:
        if v not in seen:
            seen.append(v)
        out.append(seen.index(v))
    return tuple(out)


def test_figure_examples():
    assert anonymize("ABCAD").labels == (0, 1, 2, 0, 3)
    assert anonymize("CDECA").labels == (0, 1, 2, 0, 3)
    assert anonymize("ACEDA").labels == (0, 1, 2, 3, 0)


def test_forced_walk_on_single_edge():
    g = Graph.from_edges(2, [(0, 1)])
    w = sample_walk(g, 0, 2, rng=np.random.default_rng(0))
    assert w.nodes == (0, 1, 0)


def test_isolated_start_rejected():
    g = Graph.from_edges(3, [(0, 1)])
    with pytest.raises(ValueError):
        sample_walk(g, 2, 3)


def test_walks_follow_arcs():
    rng = np.random.default_rng(1)
    g = Graph.from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3)])
    for bias in (BiasParams(), BiasParams(0.5, 4.0)):
        nodes, arcs = walk_many(g, np.arange(6).repeat(20), 7, bias, rng)
        src = g.arc_sources()
        np.testing.assert_array_equal(src[arcs], nodes[:, :-1])
        np.testing.assert_array_equal(g.indices[arcs], nodes[:, 1:])


def test_star_first_step_uniform():
    star = Graph.from_edges(4, [(0, 1), (0, 2), (0, 3)])
    nodes, _ = walk_many(star, np.zeros(30000, int), 1, BiasParams(), np.random.default_rng(2))
    freq = np.bincount(nodes[:, 1], minlength=4)[1:] / 30000
    assert np.all(np.abs(freq - 1 / 3) < 0.02)


def test_biased_triangle_return_weight():
    # walk (0, 1, ?): back to 0 has weight 1/p, to 2 weight 1 since 2 neighbors 0
    n = 60000
    rng = np.random.default_rng(3)
    bias = BiasParams(10.0, 0.1)
    from gpm.tokenizer import _step
    nxt, _ = _step(TRIANGLE, np.zeros(n, int), np.ones(n, int), bias, rng, TRIANGLE.arc_keys())
    assert abs(np.mean(nxt == 0) - 1 / 11) < 0.02


def test_loop_adjacency_examples():
    z = loop_adjacency((0, 1, 0, 2))
    assert z.tolist() == [[1, 0, 1, 0], [0, 1, 0, 0], [1, 0, 1, 0], [0, 0, 0, 1]]
    np.testing.assert_array_equal(loop_adjacency((0, 1, 2)), np.eye(3))
    np.testing.assert_array_equal(loop_adjacency((0, 0, 0)), np.ones((3, 3)))
    assert loop_adjacency((0, 1), size=4).shape == (2, 4)


def test_batch_helpers_match_scalar():
    rng = np.random.default_rng(4)
    nodes, _ = walk_many(TRIANGLE, rng.integers(0, 3, 50), 5, BiasParams(), rng)
    nodes = nodes.copy()
    nodes[::3, 4:] = PAD
    anon = anonymize_batch(nodes)
    adj = loop_adjacency_batch(nodes)
    for row, a, z in zip(nodes, anon, adj):
        real = row[row != PAD]
        assert tuple(a[: len(real)]) == anonymize(real.tolist()).labels
        assert np.all(a[len(real):] == PAD)
        ref = loop_adjacency(anonymize(real.tolist()), size=len(row))
        np.testing.assert_array_equal(z[: len(real)], ref)
        np.testing.assert_array_equal(z, z.T)
        assert np.all(np.diag(z)[: len(real)])


def test_node_instance_contract():
    ps = tokenize_instance(TRIANGLE, InstanceRef.node(1), 4, [2], rng=np.random.default_rng(0))
    assert len(ps) == 4
    for p in ps.patterns:
        assert p.semantic.nodes[0] == 1 and p.scale == 2 and len(p.semantic.nodes) == 3


def test_edge_instance_split():
    ps = tokenize_instance(TRIANGLE, InstanceRef.edge(0, 2), 5, [3], rng=np.random.default_rng(0))
    starts = [p.semantic.nodes[0] for p in ps.patterns]
    assert starts == [0, 0, 0, 2, 2]


def test_round_robin_scales():
    ps = tokenize_instance(TRIANGLE, InstanceRef.node(0), 8, [2, 4, 6, 8],
                           rng=np.random.default_rng(0))
    assert [p.scale for p in ps.patterns] == [2, 4, 6, 8, 2, 4, 6, 8]


def test_graph_instance_skips_isolated_nodes():
    g = Graph.from_edges(5, [(0, 1), (1, 2)])
    batch = GraphBatch.from_graphs([g, TRIANGLE])
    ps = tokenize_instance(batch, InstanceRef.graph(0), 64, [2], rng=np.random.default_rng(0))
    assert {p.semantic.nodes[0] for p in ps.patterns} <= {0, 1, 2}
    ps = tokenize_instance(batch, InstanceRef.graph(1), 16, [2], rng=np.random.default_rng(0))
    assert all(5 <= v < 8 for p in ps.patterns for v in p.semantic.nodes)
    empty = GraphBatch.from_graphs([Graph.from_edges(2, []), TRIANGLE])
    with pytest.raises(ValueError):
        tokenize_instance(empty, InstanceRef.graph(0), 4, [2])


@pytest.mark.parametrize("k", [1, 3, 8, 13])
@pytest.mark.parametrize("scales", [[1], [2, 4], [2, 4, 6, 8]])
def test_pattern_set_size(k, scales):
    g = Graph.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    batch = GraphBatch.from_graphs([g, TRIANGLE])
    for source, inst in ((g, InstanceRef.node(2)), (g, InstanceRef.edge(1, 2)),
                         (batch, InstanceRef.graph(1))):
        assert len(tokenize_instance(source, inst, k, scales)) == k


def test_presample_determinism_and_workers(tmp_path):
    g = Graph.from_edges(1200, [(i, (i + 1) % 1200) for i in range(1200)]
                         + [(i, (i * 7 + 3) % 1200) for i in range(0, 1200, 2)
                            if (i * 7 + 3) % 1200 != i])
    ids = np.arange(1200)[:, None]
    a = presample(g, (InstanceKind.NODE, ids), 16, [2, 4, 6, 8], BiasParams(), seed=5)
    b = presample(g, (InstanceKind.NODE, ids), 16, [2, 4, 6, 8], BiasParams(), seed=5, workers=4)
    a.save(tmp_path / "a.bin")
    b.save(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    c = presample(g, (InstanceKind.NODE, ids), 16, [2, 4, 6, 8], BiasParams(), seed=6)
    assert c.digest() != a.digest()
    back = PatternCache.load(tmp_path / "a.bin")
    assert back.digest() == a.digest() and back.header() == a.header()


def test_cache_pattern_set_and_json(tmp_path):
    cache = presample(TRIANGLE, [InstanceRef.node(0), InstanceRef.node(2)], 6, [2, 3], seed=0)
    ps = cache.pattern_set(InstanceRef.node(2))
    assert len(ps) == 6 and all(p.semantic.nodes[0] == 2 for p in ps.patterns)
    with pytest.raises(KeyError):
        cache.row_of(InstanceRef.node(1))
    cache.export_json(tmp_path / "c.json")
    assert (tmp_path / "c.json").stat().st_size > 0


def test_subsample_without_replacement():
    rng = np.random.default_rng(0)
    idx = subsample(128, 50, 16, rng)
    assert idx.shape == (50, 16)
    for row in idx:
        assert len(set(row.tolist())) == 16 and row.max() < 128
    again = subsample(128, 50, 16, np.random.default_rng(0))
    np.testing.assert_array_equal(idx, again)
    with pytest.raises(ValueError):
        subsample(8, 1, 9, rng)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=10), st.permutations(range(7)))
def test_anonymize_invariant_under_relabeling(walk, perm):
    assert anonymize([perm[v] for v in walk]) == anonymize(walk)
    assert anonymize(walk).labels == first_occurrence_oracle(walk)


def test_exhaustive_small_graph_walks():
    k4 = Graph.from_edges(4, list(itertools.combinations(range(4), 2)))
    c5 = Graph.from_edges(5, [(i, (i + 1) % 5) for i in range(5)])
    for g in (k4, c5):
        count = 0
        frontier = [(v,) for v in range(g.num_nodes)]
        for _ in range(6):
            frontier = [w + (int(u),) for w in frontier for u in g.neighbors(w[-1])]
            for w in frontier:
                assert anonymize(w).labels == first_occurrence_oracle(w)
                count += 1
        assert count > 0
