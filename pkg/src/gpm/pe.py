"""Node positional encodings: Laplacian eigenvectors and random-walk return probabilities."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .graph import Graph


class PEKind(str, Enum):
    LAP = "lap"
    RWSE = "rwse"
    NONE = "none"


@dataclass(frozen=True, eq=False)
class NodePE:
    kind: PEKind
    dim: int
    table: np.ndarray
    eigvals: np.ndarray | None = None

    def to_json(self, path: str | Path):
        Path(path).write_text(json.dumps({
            "kind": self.kind.value, "dim": self.dim, "table": self.table.tolist(),
        }), encoding="utf-8")


def _components(g: Graph) -> list[np.ndarray]:
    a = csr_matrix((np.ones(g.num_arcs), g.indices, g.indptr), shape=(g.num_nodes,) * 2)
    n_comp, labels = connected_components(a, directed=False)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n_comp + 1))
    return [order[bounds[i]:bounds[i + 1]] for i in range(n_comp)]


def _sub_adjacency(g: Graph, nodes: np.ndarray) -> np.ndarray:
    remap = -np.ones(g.num_nodes, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    a = np.zeros((len(nodes), len(nodes)))
    for i, v in enumerate(nodes):
        nb = g.indices[g.indptr[v]:g.indptr[v + 1]]
        np.add.at(a[i], remap[nb], 1.0)
    return a


def sym_normalized_laplacian(a: np.ndarray) -> np.ndarray:
    deg = a.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(len(a)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]


def _sign_fix(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def laplacian_pe(g: Graph, dim: int) -> NodePE:
    """Eigenvectors 2..dim+1 of ``I - D^-1/2 A D^-1/2``, per connected component.

    Each column is sign-fixed so its largest-magnitude entry is positive.
    Components with fewer than ``dim + 1`` nodes leave the missing columns
    zero. ``eigvals`` holds the selected eigenvalues when the graph is
    connected.
    """
    if dim >= g.num_nodes:
        raise ValueError(f"PE dim {dim} must be smaller than the node count {g.num_nodes}")
    table = np.zeros((g.num_nodes, dim))
    eigvals = None
    if dim == 0:
        return NodePE(PEKind.LAP, 0, table)
    comps = _components(g)
    for nodes in comps:
        if len(nodes) < 2:
            continue
        lap = sym_normalized_laplacian(_sub_adjacency(g, nodes))
        try:
            vals, vecs = np.linalg.eigh(lap)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"eigensolver did not converge: {exc}") from exc
        take = min(dim, len(nodes) - 1)
        table[np.ix_(nodes, np.arange(take))] = _sign_fix(vecs[:, 1:take + 1])
        if len(comps) == 1:
            eigvals = vals[1:take + 1]
    return NodePE(PEKind.LAP, dim, table, eigvals)


def rwse(g: Graph, dim: int) -> NodePE:
    """Entry ``(v, t)`` is the ``t``-step return probability ``[(D^-1 A)^t]_vv``.

    Isolated nodes get all-zero rows.
    """
    if dim < 1:
        raise ValueError("RWSE dim must be at least 1")
    table = np.zeros((g.num_nodes, dim))
    for nodes in _components(g):
        a = _sub_adjacency(g, nodes)
        deg = a.sum(axis=1)
        if not deg.any():
            continue
        p = a / np.where(deg > 0, deg, 1.0)[:, None]
        power = np.eye(len(nodes))
        for t in range(dim):
            power = power @ p
            table[nodes, t] = np.diag(power)
    return NodePE(PEKind.RWSE, dim, table)


def compute_pe(g: Graph, kind: PEKind | str, dim: int) -> NodePE:
    kind = PEKind(kind)
    if kind is PEKind.NONE or dim == 0:
        return NodePE(PEKind.NONE, 0, np.zeros((g.num_nodes, 0)))
    if kind is PEKind.LAP:
        return laplacian_pe(g, dim)
    return rwse(g, dim)
