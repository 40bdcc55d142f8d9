"""Immutable CSR graph storage, structural queries and JSON serialization."""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GraphFormatError(ValueError):
    """Raised when a graph file or edge list violates the storage contract."""


class InstanceKind(str, Enum):
    NODE = "node"
    EDGE = "edge"
    GRAPH = "graph"


@dataclass(frozen=True)
class InstanceRef:
    """A learning instance: a node id, an endpoint pair, or a graph index."""

    kind: InstanceKind
    ids: tuple[int, ...]

    @classmethod
    def node(cls, v: int) -> "InstanceRef":
        return cls(InstanceKind.NODE, (int(v),))

    @classmethod
    def edge(cls, u: int, v: int) -> "InstanceRef":
        return cls(InstanceKind.EDGE, (int(u), int(v)))

    @classmethod
    def graph(cls, index: int) -> "InstanceRef":
        return cls(InstanceKind.GRAPH, (int(index),))


def _readonly(arr: np.ndarray | None) -> np.ndarray | None:
    if arr is not None:
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph in CSR form.

    Every undirected edge is stored as two arcs. ``edge_features`` is indexed
    by arc position in ``indices`` so a walk can read the feature of the arc
    it just traversed directly.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    node_features: np.ndarray | None = None
    edge_features: np.ndarray | None = None
    node_labels: np.ndarray | None = None
    graph_label: int | float | None = None
    allow_self_loops: bool = False

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indptr", _readonly(indptr))
        object.__setattr__(self, "indices", _readonly(indices))
        for name in ("node_features", "edge_features"):
            val = getattr(self, name)
            if val is not None:
                val = np.ascontiguousarray(val, dtype=np.float64)
                if val.ndim != 2:
                    raise GraphFormatError(f"{name} must be a 2-D table")
                object.__setattr__(self, name, _readonly(val))
        if self.node_labels is not None:
            object.__setattr__(
                self, "node_labels", _readonly(np.asarray(self.node_labels, dtype=np.int64))
            )
        self._validate()

    def _validate(self):
        n = self.num_nodes
        if len(self.indptr) != n + 1 or self.indptr[0] != 0:
            raise GraphFormatError("CSR offsets must have num_nodes + 1 entries starting at 0")
        if np.any(np.diff(self.indptr) < 0):
            raise GraphFormatError("CSR offsets must be nondecreasing")
        if self.indptr[-1] != len(self.indices):
            raise GraphFormatError("last CSR offset must equal the arc count")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise GraphFormatError("neighbor id out of range")
        src = np.repeat(np.arange(n, dtype=np.int64), np.diff(self.indptr))
        if not self.allow_self_loops and np.any(src == self.indices):
            raise GraphFormatError("self-loop present but allow_self_loops is off")
        keys = src * n + self.indices
        if np.any(np.diff(keys) <= 0):
            raise GraphFormatError("neighbor lists must be strictly ascending")
        rev = self.indices * n + src
        pos = np.searchsorted(keys, rev)
        pos = np.minimum(pos, max(len(keys) - 1, 0))
        if len(keys) and not np.array_equal(keys[pos], rev):
            raise GraphFormatError("graph is not symmetric: missing reverse arc")
        if self.node_features is not None and self.node_features.shape[0] != n:
            raise GraphFormatError("node feature rows must equal num_nodes")
        if self.edge_features is not None and self.edge_features.shape[0] != len(self.indices):
            raise GraphFormatError("edge feature rows must equal the arc count")
        if self.node_labels is not None and self.node_labels.shape != (n,):
            raise GraphFormatError("node_labels must have one entry per node")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_arcs(
        cls,
        num_nodes: int,
        arcs: np.ndarray | Sequence[Sequence[int]],
        *,
        arc_features: np.ndarray | None = None,
        symmetrize: bool = False,
        allow_self_loops: bool = False,
        node_features: np.ndarray | None = None,
        node_labels: np.ndarray | Sequence[int] | None = None,
        graph_label: int | float | None = None,
    ) -> "Graph":
        """Build a graph from directed arcs.

        Without ``symmetrize`` every arc must have its reverse listed. With it,
        missing reverse arcs are added and inherit the forward arc's features.
        Duplicate arcs are collapsed (first occurrence wins).
        """
        arcs = np.asarray(arcs, dtype=np.int64).reshape(-1, 2)
        if arc_features is not None:
            arc_features = np.asarray(arc_features, dtype=np.float64)
            if arc_features.shape[0] != len(arcs):
                raise GraphFormatError("edge feature rows must equal the number of listed edges")
        if len(arcs) and (arcs.min() < 0 or arcs.max() >= num_nodes):
            raise GraphFormatError("edge endpoint out of range")
        if not allow_self_loops and np.any(arcs[:, 0] == arcs[:, 1]):
            raise GraphFormatError("self-loop present but allow_self_loops is off")
        n = int(num_nodes)
        keys = arcs[:, 0] * n + arcs[:, 1]
        if symmetrize:
            rev = arcs[:, ::-1]
            keys = np.concatenate([keys, rev[:, 0] * n + rev[:, 1]])
            arcs = np.concatenate([arcs, rev])
            if arc_features is not None:
                arc_features = np.concatenate([arc_features, arc_features])
        # stable unique keeps the first listed copy of each arc
        uniq, first = np.unique(keys, return_index=True)
        arcs = arcs[first]
        if arc_features is not None:
            arc_features = arc_features[first]
        if not symmetrize:
            rev_keys = arcs[:, 1] * n + arcs[:, 0]
            pos = np.minimum(np.searchsorted(uniq, rev_keys), max(len(uniq) - 1, 0))
            if len(uniq) and not np.array_equal(uniq[pos], rev_keys):
                raise GraphFormatError(
                    "asymmetric edge list: a reverse arc is missing (use symmetrize)"
                )
        counts = np.bincount(arcs[:, 0], minlength=n) if len(arcs) else np.zeros(n, np.int64)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return cls(
            num_nodes=n,
            indptr=indptr,
            indices=arcs[:, 1],
            node_features=node_features,
            edge_features=arc_features,
            node_labels=None if node_labels is None else np.asarray(node_labels),
            graph_label=graph_label,
            allow_self_loops=allow_self_loops,
        )

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Iterable[Sequence[int]], **kwargs) -> "Graph":
        """Build from undirected pairs, each listed once in either direction."""
        edges = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                           dtype=np.int64).reshape(-1, 2)
        return cls.from_arcs(num_nodes, edges, symmetrize=True, **kwargs)

    # -- queries ----------------------------------------------------------

    @property
    def num_arcs(self) -> int:
        return len(self.indices)

    @property
    def num_edges(self) -> int:
        loops = int(np.sum(self.arc_sources() == self.indices))
        return (self.num_arcs - loops) // 2 + loops

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def _check_node(self, v: int):
        if not 0 <= v < self.num_nodes:
            raise IndexError(f"node id {v} out of range for {self.num_nodes} nodes")

    def degree(self, v: int) -> int:
        self._check_node(v)
        return int(self.indptr[v + 1] - self.indptr[v])

    def neighbors(self, v: int) -> np.ndarray:
        self._check_node(v)
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def arc_sources(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees)

    def arc_keys(self) -> np.ndarray:
        """Sorted ``u * N + v`` keys, one per arc, for vectorized adjacency tests."""
        return self.arc_sources() * self.num_nodes + self.indices

    def has_edges(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        keys = self.arc_keys()
        if len(keys) == 0:
            return np.zeros(np.shape(u), dtype=bool)
        q = np.asarray(u, dtype=np.int64) * self.num_nodes + np.asarray(v, dtype=np.int64)
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        return keys[pos] == q

    def undirected_edges(self) -> np.ndarray:
        """Each undirected edge once, as ``(u, v)`` with ``u <= v``."""
        src = self.arc_sources()
        keep = src <= self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        a[self.arc_sources(), self.indices] = 1.0
        return a

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.num_nodes).tobytes())
        h.update(self.indptr.tobytes())
        h.update(self.indices.tobytes())
        for arr in (self.node_features, self.edge_features, self.node_labels):
            h.update(b"|" if arr is None else np.ascontiguousarray(arr).tobytes())
        h.update(repr(self.graph_label).encode())
        return h.hexdigest()[:16]

    def with_labels(self, labels: np.ndarray) -> "Graph":
        return Graph(self.num_nodes, self.indptr, self.indices, self.node_features,
                     self.edge_features, np.asarray(labels), self.graph_label,
                     self.allow_self_loops)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        src = self.arc_sources()
        return {
            "num_nodes": self.num_nodes,
            "edges": np.stack([src, self.indices], axis=1).tolist(),
            "node_features": None if self.node_features is None else self.node_features.tolist(),
            "edge_features": None if self.edge_features is None else self.edge_features.tolist(),
            "node_labels": None if self.node_labels is None else self.node_labels.tolist(),
            "graph_label": self.graph_label,
        }

    @classmethod
    def from_dict(cls, obj: dict, *, symmetrize: bool = False,
                  allow_self_loops: bool = False) -> "Graph":
        try:
            n = int(obj["num_nodes"])
            edges = obj.get("edges") or []
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"malformed graph object: {exc}") from exc

        def table(key):
            val = obj.get(key)
            if val is None:
                return None
            arr = np.asarray(val, dtype=np.float64)
            return arr.reshape(len(val), -1)

        node_features = table("node_features")
        if node_features is not None and node_features.shape[0] != n:
            raise GraphFormatError("node feature rows must equal num_nodes")
        return cls.from_arcs(
            n,
            np.asarray(edges, dtype=np.int64).reshape(-1, 2),
            arc_features=table("edge_features"),
            symmetrize=symmetrize,
            allow_self_loops=allow_self_loops,
            node_features=node_features,
            node_labels=obj.get("node_labels"),
            graph_label=obj.get("graph_label"),
        )


def dump_graphs(graphs: Graph | Sequence[Graph], path: str | Path):
    """Write one graph as an object, or a dataset as an array of objects."""
    obj = graphs.to_dict() if isinstance(graphs, Graph) else [g.to_dict() for g in graphs]
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def load_graph(path: str | Path, format: str = "json", *, symmetrize: bool = False,
               allow_self_loops: bool = False) -> Graph | list[Graph]:
    """Load a graph (or a list of graphs) from a JSON file.

    Raises:
        GraphFormatError: on parse failures, asymmetric arcs without
            ``symmetrize`` and feature row-count mismatches.
    """
    if format != "json":
        raise GraphFormatError(f"unsupported graph format {format!r}")
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: {exc}") from exc
    kw = dict(symmetrize=symmetrize, allow_self_loops=allow_self_loops)
    if isinstance(obj, list):
        return [Graph.from_dict(o, **kw) for o in obj]
    return Graph.from_dict(obj, **kw)


def degree(g: Graph, v: int) -> int:
    return g.degree(v)


def neighbors(g: Graph, v: int) -> np.ndarray:
    return g.neighbors(v)


def homophily_ratio(g: Graph, labels: Sequence[int] | np.ndarray) -> float:
    """Edge homophily: share of edges whose endpoints carry the same label."""
    labels = np.asarray(labels)
    if labels.shape != (g.num_nodes,):
        raise ValueError(f"expected {g.num_nodes} labels, got {labels.shape}")
    if g.num_arcs == 0:
        return 0.0
    src = g.arc_sources()
    return float(np.mean(labels[src] == labels[g.indices]))


def ego_graph(g: Graph, v: int, radius: int) -> tuple[Graph, np.ndarray]:
    """Induced subgraph within ``radius`` hops of ``v``.

    Returns the subgraph and the array mapping its node ids to ids in ``g``.
    """
    g._check_node(v)
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    dist = {v: 0}
    queue = deque([v])
    while queue:
        u = queue.popleft()
        if dist[u] == radius:
            continue
        for w in g.neighbors(u):
            w = int(w)
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    nodes = np.array(sorted(dist), dtype=np.int64)
    remap = -np.ones(g.num_nodes, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    src = g.arc_sources()
    keep = (remap[src] >= 0) & (remap[g.indices] >= 0)
    arcs = np.stack([remap[src[keep]], remap[g.indices[keep]]], axis=1)
    sub = Graph.from_arcs(
        len(nodes), arcs,
        arc_features=None if g.edge_features is None else g.edge_features[keep],
        allow_self_loops=g.allow_self_loops,
        node_features=None if g.node_features is None else g.node_features[nodes],
        node_labels=None if g.node_labels is None else g.node_labels[nodes],
    )
    return sub, nodes


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of several graphs, so graph-level work stays vectorized."""

    union: Graph
    offsets: np.ndarray  # node offset of each member graph, plus a final total
    graph_labels: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "GraphBatch":
        if not graphs:
            raise ValueError("empty graph list")
        sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        indptr = [np.zeros(1, np.int64)]
        arc_base = 0
        for g in graphs:
            indptr.append(g.indptr[1:] + arc_base)
            arc_base += g.num_arcs
        indices = np.concatenate([g.indices + off for g, off in zip(graphs, offsets[:-1])])

        def stack(attr):
            vals = [getattr(g, attr) for g in graphs]
            if all(v is None for v in vals):
                return None
            if any(v is None for v in vals):
                raise GraphFormatError(f"{attr} present on some graphs but not all")
            return np.concatenate(vals)

        labels = [g.graph_label for g in graphs]
        if any(lab is None for lab in labels):
            glabels = np.full(len(graphs), np.nan)
        else:
            glabels = np.asarray(labels)
        union = Graph(
            num_nodes=int(offsets[-1]),
            indptr=np.concatenate(indptr),
            indices=indices,
            node_features=stack("node_features"),
            edge_features=stack("edge_features"),
            node_labels=stack("node_labels"),
            allow_self_loops=any(g.allow_self_loops for g in graphs),
        )
        return cls(union, offsets, glabels)

    @property
    def num_graphs(self) -> int:
        return len(self.offsets) - 1

    def member_nodes(self, i: int) -> np.ndarray:
        return np.arange(self.offsets[i], self.offsets[i + 1])
