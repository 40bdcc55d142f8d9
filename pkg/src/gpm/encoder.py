"""Pattern encoder: one embedding per walk from its semantic and anonymous paths."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .graph import Graph
from .nn import GRU, Linear, Module, TransformerBlock, sinusoidal_positions
from .pe import NodePE
from .tokenizer import PAD, SemanticPath, loop_adjacency_batch


class SemanticKind(str, Enum):
    MEAN = "mean"
    GRU = "gru"
    TRANSFORMER = "transformer"


class AnonymousKind(str, Enum):
    MEAN = "mean"
    GRU = "gru"


@dataclass(frozen=True)
class EncoderConfig:
    semantic_kind: SemanticKind = SemanticKind.TRANSFORMER
    anonymous_kind: AnonymousKind = AnonymousKind.GRU
    hidden_dim: int = 256
    lam: float = 1.0
    max_len: int = 8
    heads: int = 4
    dropout: float = 0.0
    prenorm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "semantic_kind", SemanticKind(self.semantic_kind))
        object.__setattr__(self, "anonymous_kind", AnonymousKind(self.anonymous_kind))
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


class FeatureTables:
    """Per-node, per-arc and positional tables that walk steps read from.

    Graphs without node features get a single constant-one column.
    """

    def __init__(self, g: Graph, pe: NodePE | None = None, use_edge_features: bool = True):
        self.x = g.node_features if g.node_features is not None else np.ones((g.num_nodes, 1))
        self.e = g.edge_features if use_edge_features else None
        self.pe = pe.table if pe is not None and pe.dim > 0 else None
        if self.pe is not None and self.pe.shape[0] != g.num_nodes:
            raise ValueError("positional table does not match the graph")

    @property
    def dim(self) -> int:
        return (self.x.shape[1] + (0 if self.e is None else self.e.shape[1])
                + (0 if self.pe is None else self.pe.shape[1]))

    def steps(self, nodes: np.ndarray, arcs: np.ndarray, dtype=np.float32) -> np.ndarray:
        """Step features ``[x_i | e_(i-1,i) | pe_i]`` for padded walks ``(..., T)``.

        The edge slot of step 0 and every padding step is zero.
        """
        valid = nodes != PAD
        safe = np.where(valid, nodes, 0)
        parts = [self.x[safe]]
        if self.e is not None:
            arc_ok = arcs != PAD
            ef = self.e[np.where(arc_ok, arcs, 0)] * arc_ok[..., None]
            lead = np.zeros(ef.shape[:-2] + (1, ef.shape[-1]))
            parts.append(np.concatenate([lead, ef], axis=-2))
        if self.pe is not None:
            parts.append(self.pe[safe])
        out = np.concatenate(parts, axis=-1) * valid[..., None]
        return out.astype(dtype)


def assemble_steps(g: Graph, walk: SemanticPath, pe: NodePE | None = None) -> np.ndarray:
    """Step feature matrix ``(L + 1, d)`` for a single walk."""
    if pe is not None and pe.dim > 0 and pe.table.shape[0] != g.num_nodes:
        raise ValueError("positional table does not match the graph")
    tables = FeatureTables(g, pe)
    nodes = np.asarray(walk.nodes)[None]
    if tables.e is not None and len(walk.arcs) != len(walk.nodes) - 1:
        raise ValueError("walk lacks the arc ids needed for edge features")
    arcs = np.asarray(walk.arcs if walk.arcs else [PAD] * (len(walk.nodes) - 1))[None]
    return tables.steps(nodes, arcs, np.float64)[0]


def combine(s, a, lam: float):
    """``s + lam * a``; accepts arrays or tensors."""
    if s.shape != a.shape:
        raise ValueError(f"embedding shapes differ: {s.shape} vs {a.shape}")
    if isinstance(s, Tensor) or isinstance(a, Tensor):
        return s if lam == 0 else ag.add(s, ag.mul(a, lam))
    return np.asarray(s) + lam * np.asarray(a)


class PatternEncoder(Module):
    def __init__(self, cfg: EncoderConfig, in_dim: int, rng: np.random.Generator,
                 dropout_rng: np.random.Generator | None = None, dtype=np.float32):
        H = cfg.hidden_dim
        self.cfg = cfg
        self.sem_proj = Linear(in_dim, H, rng, dtype=dtype)
        if cfg.semantic_kind is SemanticKind.GRU:
            self.sem_gru = GRU(H, H, rng, dtype=dtype)
        elif cfg.semantic_kind is SemanticKind.TRANSFORMER:
            self.sem_block = TransformerBlock(H, cfg.heads, rng, cfg.dropout, dropout_rng,
                                              cfg.prenorm, dtype=dtype)
            self._positions = sinusoidal_positions(cfg.max_len + 1, H, dtype)
        # the anonymous branch is not built at all when its weight is zero
        if cfg.lam > 0:
            self.anon_proj = Linear(cfg.max_len + 1, H, rng, dtype=dtype)
            if cfg.anonymous_kind is AnonymousKind.GRU:
                self.anon_gru = GRU(H, H, rng, dtype=dtype)

    def encode_semantic(self, steps: np.ndarray | Tensor, mask: np.ndarray) -> Tensor:
        h = self.sem_proj(ag.as_tensor(steps))
        kind = self.cfg.semantic_kind
        if kind is SemanticKind.MEAN:
            return ag.masked_mean(h, mask, axis=1)
        if kind is SemanticKind.GRU:
            return self.sem_gru(h, mask)
        T = h.shape[1]
        h = ag.add(h, self._positions[:T].astype(h.dtype))
        out, _ = self.sem_block(h, key_mask=mask)
        return ag.masked_mean(out, mask, axis=1)

    def encode_anonymous(self, rows: np.ndarray, mask: np.ndarray) -> Tensor:
        T_model = self.cfg.max_len + 1
        if rows.shape[-1] > T_model:
            raise ValueError("walk longer than the encoder's configured maximum scale")
        if rows.shape[-1] < T_model:
            pad = [(0, 0)] * (rows.ndim - 1) + [(0, T_model - rows.shape[-1])]
            rows = np.pad(rows, pad)
        h = self.anon_proj(ag.as_tensor(rows.astype(self.sem_proj.weight.dtype)))
        if self.cfg.anonymous_kind is AnonymousKind.MEAN:
            return ag.masked_mean(h, mask, axis=1)
        return self.anon_gru(h, mask)

    def __call__(self, steps: np.ndarray, nodes: np.ndarray) -> Tensor:
        """Encode ``n`` padded walks: ``steps`` ``(n, T, d)``, ``nodes`` ``(n, T)``."""
        mask = nodes != PAD
        s = self.encode_semantic(steps, mask)
        if self.cfg.lam == 0:
            return s
        a = self.encode_anonymous(loop_adjacency_batch(nodes), mask)
        return combine(s, a, self.cfg.lam)
