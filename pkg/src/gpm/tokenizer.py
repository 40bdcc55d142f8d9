"""Random-walk pattern tokenizer.

Walks are sampled in vectorized blocks: all walks of a block advance one step
at a time through numpy gathers on the CSR arrays. Second-order (p, q) walks
use exact rejection sampling against the largest of the three weights.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Graph, GraphBatch, InstanceKind, InstanceRef

PAD = -1
BLOCK_SIZE = 512
_CACHE_MAGIC = b"GPMPCH01"


@dataclass(frozen=True)
class BiasParams:
    p: float = 1.0
    q: float = 1.0

    def __post_init__(self):
        if not (self.p > 0 and self.q > 0):
            raise ValueError("walk bias parameters p and q must be positive")

    @property
    def unbiased(self) -> bool:
        return self.p == 1.0 and self.q == 1.0


@dataclass(frozen=True)
class SemanticPath:
    nodes: tuple[int, ...]
    arcs: tuple[int, ...] = ()

    @property
    def length(self) -> int:
        return len(self.nodes) - 1


@dataclass(frozen=True)
class AnonymousPath:
    labels: tuple[int, ...]


@dataclass(frozen=True)
class WalkPattern:
    semantic: SemanticPath
    anonymous: AnonymousPath
    scale: int


@dataclass
class PatternSet:
    instance: InstanceRef
    patterns: list[WalkPattern]

    def __len__(self):
        return len(self.patterns)


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(block)])))


# ---------------------------------------------------------------------------
# walking


def _step(g: Graph, prev: np.ndarray | None, cur: np.ndarray, bias: BiasParams,
          rng: np.random.Generator, keys: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Advance every walker one step. Returns (next nodes, arc ids)."""
    deg = g.indptr[cur + 1] - g.indptr[cur]
    if prev is None or bias.unbiased:
        off = (rng.random(len(cur)) * deg).astype(np.int64)
        arc = g.indptr[cur] + off
        return g.indices[arc], arc
    inv_p, inv_q = 1.0 / bias.p, 1.0 / bias.q
    wmax = max(inv_p, 1.0, inv_q)
    arc = np.empty(len(cur), dtype=np.int64)
    todo = np.arange(len(cur))
    n = g.num_nodes
    while len(todo):
        c, pv = cur[todo], prev[todo]
        off = (rng.random(len(todo)) * deg[todo]).astype(np.int64)
        cand_arc = g.indptr[c] + off
        x = g.indices[cand_arc]
        q = pv * n + x
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        w = np.where(x == pv, inv_p, np.where(keys[pos] == q, 1.0, inv_q))
        ok = rng.random(len(todo)) * wmax < w
        arc[todo[ok]] = cand_arc[ok]
        todo = todo[~ok]
    return g.indices[arc], arc


def walk_many(g: Graph, starts: np.ndarray, length: int, bias: BiasParams,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample one walk of ``length`` steps from each start.

    Returns node ids ``(n, length + 1)`` and traversed arc ids ``(n, length)``.
    """
    starts = np.asarray(starts, dtype=np.int64)
    if np.any(g.degrees[starts] == 0):
        bad = int(starts[g.degrees[starts] == 0][0])
        raise ValueError(f"cannot start a walk at isolated node {bad}")
    keys = None if bias.unbiased else g.arc_keys()
    nodes = np.empty((len(starts), length + 1), dtype=np.int64)
    arcs = np.empty((len(starts), length), dtype=np.int64)
    nodes[:, 0] = starts
    prev = None
    for i in range(length):
        nxt, arc = _step(g, prev, nodes[:, i], bias, rng, keys)
        nodes[:, i + 1] = nxt
        arcs[:, i] = arc
        prev = nodes[:, i]
    return nodes, arcs


def sample_walk(g: Graph, start: int, length: int, bias: BiasParams | None = None,
                rng: np.random.Generator | None = None) -> SemanticPath:
    if length < 1:
        raise ValueError("walk length must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    nodes, arcs = walk_many(g, np.array([start]), length, bias or BiasParams(), rng)
    return SemanticPath(tuple(int(v) for v in nodes[0]), tuple(int(a) for a in arcs[0]))


# ---------------------------------------------------------------------------
# anonymous paths


def anonymize(walk: SemanticPath | Sequence) -> AnonymousPath:
    """Relabel a walk by order of first appearance: (A,B,C,A,D) -> (0,1,2,0,3)."""
    seq = walk.nodes if isinstance(walk, SemanticPath) else tuple(walk)
    if not seq:
        raise ValueError("cannot anonymize an empty walk")
    first: dict = {}
    return AnonymousPath(tuple(first.setdefault(v, len(first)) for v in seq))


def anonymize_batch(nodes: np.ndarray) -> np.ndarray:
    """Vectorized anonymization of padded walks ``(..., T)``; pads stay ``PAD``."""
    nodes = np.asarray(nodes)
    T = nodes.shape[-1]
    eq = nodes[..., :, None] == nodes[..., None, :]
    first = np.argmax(eq, axis=-1)
    is_first = first == np.arange(T)
    rank = np.cumsum(is_first, axis=-1) - 1
    out = np.take_along_axis(rank, first, axis=-1)
    return np.where(nodes == PAD, PAD, out)


def loop_adjacency(anon: AnonymousPath | Sequence[int], size: int | None = None) -> np.ndarray:
    """Rows ``z_i`` with ``z_ij = 1[label_i == label_j]``, zero-padded to ``size`` columns."""
    labels = np.asarray(anon.labels if isinstance(anon, AnonymousPath) else anon)
    n = len(labels)
    size = n if size is None else size
    if size < n:
        raise ValueError("pad size smaller than the path")
    z = np.zeros((n, size))
    z[:, :n] = labels[:, None] == labels[None, :]
    return z


def loop_adjacency_batch(nodes: np.ndarray) -> np.ndarray:
    """Loop-based adjacency for padded walks ``(..., T)`` -> ``(..., T, T)``.

    Equality of anonymous labels is equality of node ids, so this reads the
    semantic path directly. Rows and columns at padding are zero.
    """
    valid = nodes != PAD
    eq = nodes[..., :, None] == nodes[..., None, :]
    return eq & valid[..., :, None] & valid[..., None, :]


# ---------------------------------------------------------------------------
# tokenization


def _scale_plan(k: int, scales: Sequence[int]) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be at least 1")
    if not scales or min(scales) < 1:
        raise ValueError("scales must be a nonempty list of positive lengths")
    return np.asarray([scales[j % len(scales)] for j in range(k)], dtype=np.int64)


def _graph_start_pools(g: Graph, offsets: np.ndarray):
    live = np.flatnonzero(g.degrees > 0)
    lo = np.searchsorted(live, offsets[:-1])
    hi = np.searchsorted(live, offsets[1:])
    return live, lo, hi


def _starts(g: Graph, kind: InstanceKind, ids: np.ndarray, k: int,
            rng: np.random.Generator, offsets: np.ndarray | None) -> np.ndarray:
    n = len(ids)
    if kind is InstanceKind.NODE:
        starts = np.repeat(ids[:, 0:1], k, axis=1)
    elif kind is InstanceKind.EDGE:
        n_u = math.ceil(k / 2)
        starts = np.concatenate(
            [np.repeat(ids[:, 0:1], n_u, axis=1), np.repeat(ids[:, 1:2], k - n_u, axis=1)], axis=1)
    else:
        if offsets is None:
            offsets = np.array([0, g.num_nodes])
        live, lo, hi = _graph_start_pools(g, offsets)
        gi = ids[:, 0]
        size = hi[gi] - lo[gi]
        if np.any(size == 0):
            raise ValueError(f"graph {int(gi[size == 0][0])} has no node with a neighbor")
        pick = (rng.random((n, k)) * size[:, None]).astype(np.int64)
        starts = live[lo[gi][:, None] + pick]
    deg = g.degrees[starts]
    if np.any(deg == 0):
        bad = int(starts[deg == 0][0])
        raise ValueError(f"instance endpoint {bad} is isolated; no walk can start there")
    return starts


def tokenize_arrays(g: Graph, kind: InstanceKind, ids: np.ndarray, k: int,
                    scales: Sequence[int], bias: BiasParams, rng: np.random.Generator,
                    offsets: np.ndarray | None = None):
    """Tokenize a homogeneous group of instances into padded arrays.

    Returns ``(nodes, arcs, lengths)`` shaped ``(n, k, T)``, ``(n, k, T-1)`` and
    ``(n, k)`` where ``T = max(scales) + 1``.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(len(ids), -1)
    plan = _scale_plan(k, scales)
    L = int(max(scales))
    starts = _starts(g, kind, ids, k, rng, offsets)
    flat_nodes, flat_arcs = walk_many(g, starts.reshape(-1), L, bias, rng)
    nodes = flat_nodes.reshape(len(ids), k, L + 1)
    arcs = flat_arcs.reshape(len(ids), k, L)
    # walks are Markov, so truncating a max-length walk yields a walk of the shorter scale
    t = np.arange(L + 1)
    nodes = np.where(t[None, None, :] <= plan[None, :, None], nodes, PAD)
    arcs = np.where(t[None, None, 1:] <= plan[None, :, None], arcs, PAD)
    lengths = np.broadcast_to(plan, (len(ids), k)).copy()
    return nodes.astype(np.int32), arcs.astype(np.int32), lengths.astype(np.int16)


def _kind_and_ids(instances: Sequence[InstanceRef]) -> tuple[InstanceKind, np.ndarray]:
    if not instances:
        raise ValueError("no instances to tokenize")
    kinds = {inst.kind for inst in instances}
    if len(kinds) != 1:
        raise ValueError("instances of a cache must share one kind")
    return kinds.pop(), np.asarray([inst.ids for inst in instances], dtype=np.int64)


def _validate_ids(g: Graph, kind: InstanceKind, ids: np.ndarray, offsets: np.ndarray | None):
    if kind is InstanceKind.GRAPH:
        n_graphs = 1 if offsets is None else len(offsets) - 1
        if ids.min() < 0 or ids.max() >= n_graphs:
            raise IndexError("graph index out of range")
    elif ids.min() < 0 or ids.max() >= g.num_nodes:
        raise IndexError("instance node id out of range")


def _unpack(g: Graph | GraphBatch):
    if isinstance(g, GraphBatch):
        return g.union, g.offsets
    return g, None


def tokenize_instance(g: Graph | GraphBatch, inst: InstanceRef, k: int, scales: Sequence[int],
                      bias: BiasParams | None = None,
                      rng: np.random.Generator | None = None) -> PatternSet:
    graph, offsets = _unpack(g)
    kind, ids = _kind_and_ids([inst])
    _validate_ids(graph, kind, ids, offsets)
    rng = rng if rng is not None else np.random.default_rng()
    nodes, arcs, lengths = tokenize_arrays(graph, kind, ids, k, scales, bias or BiasParams(),
                                           rng, offsets)
    return _pattern_set(inst, nodes[0], arcs[0], lengths[0], graph.edge_features is not None)


def _pattern_set(inst, nodes, arcs, lengths, keep_arcs: bool) -> PatternSet:
    pats = []
    for row, arow, ln in zip(nodes, arcs, lengths):
        ln = int(ln)
        sem = SemanticPath(tuple(int(v) for v in row[:ln + 1]),
                           tuple(int(a) for a in arow[:ln]) if keep_arcs else ())
        pats.append(WalkPattern(sem, anonymize(sem), ln))
    return PatternSet(inst, pats)


# ---------------------------------------------------------------------------
# cache


@dataclass
class PatternCache:
    """Pre-sampled patterns for a list of instances, stored as padded arrays."""

    kind: InstanceKind
    ids: np.ndarray          # (n, 1) or (n, 2)
    nodes: np.ndarray        # (n, k, T) int32, PAD beyond each walk
    arcs: np.ndarray         # (n, k, T-1) int32
    lengths: np.ndarray      # (n, k) int16
    seed: int
    scales: tuple[int, ...]
    bias: BiasParams
    graph_hash: str
    meta: dict = field(default_factory=dict)
    _index: dict = field(default=None, repr=False, compare=False)

    @property
    def k(self) -> int:
        return self.nodes.shape[1]

    @property
    def max_len(self) -> int:
        return self.nodes.shape[2] - 1

    def __len__(self):
        return len(self.ids)

    def row_of(self, inst: InstanceRef) -> int:
        if self._index is None:
            self._index = {tuple(int(x) for x in r): i for i, r in enumerate(self.ids)}
        if inst.kind is not self.kind or inst.ids not in self._index:
            raise KeyError(f"instance {inst} not in cache")
        return self._index[inst.ids]

    def pattern_set(self, inst: InstanceRef, keep_arcs: bool = True) -> PatternSet:
        r = self.row_of(inst)
        return _pattern_set(inst, self.nodes[r], self.arcs[r], self.lengths[r], keep_arcs)

    def header(self) -> dict:
        return {
            "kind": self.kind.value,
            "num_instances": len(self.ids),
            "id_width": int(self.ids.shape[1]),
            "k": self.k,
            "max_len": self.max_len,
            "seed": self.seed,
            "scales": list(self.scales),
            "bias": {"p": self.bias.p, "q": self.bias.q},
            "graph_hash": self.graph_hash,
            "meta": self.meta,
        }

    def save(self, path: str | Path):
        head = json.dumps(self.header(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_CACHE_MAGIC)
            fh.write(np.uint64(len(head)).astype("<u8").tobytes())
            fh.write(head)
            fh.write(self.ids.astype("<i8").tobytes())
            fh.write(self.nodes.astype("<i4").tobytes())
            fh.write(self.arcs.astype("<i4").tobytes())
            fh.write(self.lengths.astype("<i2").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "PatternCache":
        buf = Path(path).read_bytes()
        if buf[:8] != _CACHE_MAGIC:
            raise ValueError(f"{path}: not a pattern cache")
        hlen = int(np.frombuffer(buf[8:16], "<u8")[0])
        head = json.loads(buf[16:16 + hlen])
        n, k, L, w = head["num_instances"], head["k"], head["max_len"], head["id_width"]
        stream = io.BytesIO(buf[16 + hlen:])

        def read(dtype, shape):
            count = int(np.prod(shape))
            arr = np.frombuffer(stream.read(count * np.dtype(dtype).itemsize), dtype)
            return arr.reshape(shape).astype(np.dtype(dtype).newbyteorder("="))

        ids = read("<i8", (n, w))
        nodes = read("<i4", (n, k, L + 1))
        arcs = read("<i4", (n, k, L))
        lengths = read("<i2", (n, k))
        return cls(InstanceKind(head["kind"]), ids, nodes, arcs, lengths, head["seed"],
                   tuple(head["scales"]), BiasParams(**head["bias"]), head["graph_hash"],
                   head.get("meta", {}))

    def export_json(self, path: str | Path, keep_arcs: bool = True):
        anon = anonymize_batch(self.nodes)
        out = dict(self.header())
        out["instances"] = []
        for i in range(len(self.ids)):
            pats = []
            for j in range(self.k):
                ln = int(self.lengths[i, j])
                pats.append({
                    "nodes": self.nodes[i, j, :ln + 1].tolist(),
                    "arcs": self.arcs[i, j, :ln].tolist() if keep_arcs else [],
                    "anon": anon[i, j, :ln + 1].tolist(),
                    "scale": ln,
                })
            out["instances"].append({"ids": self.ids[i].tolist(), "patterns": pats})
        Path(path).write_text(json.dumps(out), encoding="utf-8")

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.ids, self.nodes, self.arcs, self.lengths):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def presample(g: Graph | GraphBatch, instances: Sequence[InstanceRef] | tuple, k: int,
              scales: Sequence[int], bias: BiasParams | None = None, seed: int = 0,
              workers: int = 1) -> PatternCache:
    """Pre-sample ``k`` patterns for every instance.

    ``instances`` may also be given as ``(kind, ids_array)``. Instances are
    cut into fixed blocks of ``BLOCK_SIZE``, each with a generator derived
    from ``(seed, block index)``, so the result does not depend on ``workers``.
    """
    graph, offsets = _unpack(g)
    bias = bias or BiasParams()
    if (isinstance(instances, tuple) and len(instances) == 2
            and isinstance(instances[0], InstanceKind)):
        kind, ids = instances[0], np.asarray(instances[1], dtype=np.int64)
        ids = ids.reshape(len(ids), -1)
    else:
        kind, ids = _kind_and_ids(list(instances))
    _validate_ids(graph, kind, ids, offsets)
    _scale_plan(k, scales)
    n_blocks = math.ceil(len(ids) / BLOCK_SIZE)

    def run(b):
        sl = slice(b * BLOCK_SIZE, (b + 1) * BLOCK_SIZE)
        return tokenize_arrays(graph, kind, ids[sl], k, scales, bias, block_rng(seed, b), offsets)

    if workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(n_blocks)))
    else:
        parts = [run(b) for b in range(n_blocks)]
    nodes, arcs, lengths = (np.concatenate([p[i] for p in parts]) for i in range(3))
    ghash = g.union.content_hash() if isinstance(g, GraphBatch) else graph.content_hash()
    return PatternCache(kind, ids, nodes, arcs, lengths, int(seed), tuple(int(s) for s in scales),
                        bias, ghash)


def subsample(k_available: int, n_rows: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Pattern indices ``(n_rows, m)``, drawn without replacement per row."""
    if m > k_available:
        raise ValueError(f"cannot draw {m} patterns from {k_available}")
    keys = rng.random((n_rows, k_available))
    return np.argsort(keys, axis=1, kind="stable")[:, :m]
