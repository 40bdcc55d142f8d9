import numpy as np
import pytest

from gpm.bench import CSLSpec, gen_csl
from gpm.graph import Graph
from gpm.pe import compute_pe, laplacian_pe, rwse, sym_normalized_laplacian

C4 = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
K3 = Graph.from_edges(3, [(0, 1), (1, 2), (2, 0)])


def test_cycle_spectrum():
    vals = np.linalg.eigvalsh(sym_normalized_laplacian(C4.adjacency()))
    np.testing.assert_allclose(vals, [0, 1, 1, 2], atol=1e-12)


def test_complete_graph_spectrum():
    pe = laplacian_pe(K3, 2)
    np.testing.assert_allclose(pe.eigvals, [1.5, 1.5], atol=1e-12)


def test_zero_dim_is_empty():
    pe = compute_pe(K3, "lap", 0)
    assert pe.table.shape == (3, 0)


def test_dim_too_large():
    with pytest.raises(ValueError):
        laplacian_pe(K3, 3)


def test_lap_columns_orthonormal_and_deterministic():
    rng = np.random.default_rng(0)
    n = 30
    edges = [(i, (i + 1) % n) for i in range(n)] + [tuple(e) for e in rng.integers(0, n, (20, 2))
                                                    if e[0] != e[1]]
    g = Graph.from_edges(n, edges)
    a = laplacian_pe(g, 6).table
    np.testing.assert_allclose(a.T @ a, np.eye(6), atol=1e-6)
    np.testing.assert_array_equal(a, laplacian_pe(g, 6).table)
    for col in a.T:
        assert col[np.argmax(np.abs(col))] > 0


def test_lap_per_component():
    g = Graph.from_edges(7, [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 6), (6, 3)])
    pe = laplacian_pe(g, 2)
    # each component's block is an eigenbasis of that component alone
    sub = pe.table[3:]
    lap = sym_normalized_laplacian(C4.adjacency())
    for j in range(2):
        v = sub[:, j]
        lam = v @ lap @ v
        np.testing.assert_allclose(lap @ v, lam * v, atol=1e-10)


def _rwse_oracle(g, t):
    a = g.adjacency()
    p = a / a.sum(1, keepdims=True)
    return np.diag(np.linalg.matrix_power(p, t))


def test_rwse_examples():
    assert np.all(rwse(K3, 3).table[:, 0] == 0)
    np.testing.assert_allclose(rwse(C4, 2).table[:, 1], 0.5)
    np.testing.assert_allclose(rwse(K3, 3).table[:, 2], 0.25)
    g = Graph.from_edges(5, [(0, 1), (1, 2), (2, 3), (1, 3), (3, 4)])
    for t in range(1, 6):
        np.testing.assert_allclose(rwse(g, 5).table[:, t - 1], _rwse_oracle(g, t))


def test_rwse_bounds_and_isolated_rows():
    g = Graph.from_edges(4, [(0, 1), (1, 2)])
    table = rwse(g, 6).table
    assert table.min() >= 0 and table.max() <= 1
    assert np.all(table[3] == 0)


def test_rwse_constant_on_csl():
    ds = gen_csl(CSLSpec(copies_per_class=1), seed=0)
    for g in ds.graphs:
        assert np.all(g.degrees == 4)
        table = rwse(g, 12).table
        np.testing.assert_allclose(table, np.broadcast_to(table[0], table.shape), atol=1e-12)
