"""Transformer over a set of pattern embeddings, readout and prediction head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Linear, Module, TransformerBlock
from .tokenizer import PatternSet


class Readout(str, Enum):
    MEAN = "mean"
    CLASS_TOKEN = "class_token"


@dataclass(frozen=True)
class IdentifierConfig:
    layers: int = 1
    heads: int = 4
    use_class_token: bool = False
    readout: Readout = Readout.MEAN
    dropout: float = 0.0
    prenorm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "readout", Readout(self.readout))
        if self.layers < 1 or self.heads < 1:
            raise ValueError("layers and heads must be positive")
        if self.readout is Readout.CLASS_TOKEN and not self.use_class_token:
            raise ValueError("class-token readout requires use_class_token")


@dataclass
class AttentionRecord:
    """Per layer, class-token attention over patterns: arrays ``(B, heads, k)``.

    ``full`` keeps the complete ``(B, heads, S, S)`` weights of every layer.
    """

    class_token: list[np.ndarray] = field(default_factory=list)
    full: list[np.ndarray] = field(default_factory=list)

    def scores(self) -> np.ndarray:
        """Final-layer, head-averaged class-token attention ``(B, k)``."""
        if not self.class_token:
            raise ValueError("no class-token attention recorded")
        return self.class_token[-1].mean(axis=1)


class PatternIdentifier(Module):
    def __init__(self, cfg: IdentifierConfig, dim: int, rng: np.random.Generator,
                 dropout_rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg
        self.blocks = [TransformerBlock(dim, cfg.heads, rng, cfg.dropout, dropout_rng,
                                        cfg.prenorm, dtype=dtype) for _ in range(cfg.layers)]
        if cfg.use_class_token:
            self.cls = Tensor((rng.standard_normal((1, 1, dim)) * 0.02).astype(dtype),
                              requires_grad=True)

    def __call__(self, patterns: Tensor) -> tuple[Tensor, AttentionRecord]:
        """Transform ``(B, k, H)`` pattern embeddings; prepends the class token if enabled."""
        B, k, H = patterns.shape
        if k < 1:
            raise ValueError("need at least one pattern")
        x = patterns
        if self.cfg.use_class_token:
            x = ag.concat([ag.broadcast_to(self.cls, (B, 1, H)), x], axis=1)
        record = AttentionRecord()
        for block in self.blocks:
            x, w = block(x)
            record.full.append(w.data)
            if self.cfg.use_class_token:
                record.class_token.append(w.data[:, :, 0, 1:])
        return x, record

    def readout(self, transformed: Tensor) -> Tensor:
        return readout(transformed, self.cfg)


def identify(patterns, cfg: IdentifierConfig, params: PatternIdentifier):
    return params(ag.as_tensor(patterns))


def readout(transformed: Tensor, cfg: IdentifierConfig) -> Tensor:
    """Mean over pattern rows (class token excluded), or the class-token row."""
    if cfg.readout is Readout.CLASS_TOKEN:
        if not cfg.use_class_token:
            raise ValueError("class-token readout without a class token")
        return ag.take(transformed, 0, axis=1)
    if cfg.use_class_token:
        transformed = ag.slice_axis(transformed, 1, transformed.shape[1], axis=1)
    return ag.mean(transformed, axis=1)


class PredictionHead(Module):
    """Linear head. ``out_dim`` is the class count, 2 for links, 1 for regression."""

    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.out_dim = out_dim
        self.fc = Linear(dim, out_dim, rng, dtype=dtype)

    def __call__(self, embedding: Tensor) -> Tensor:
        if embedding.shape[-1] != self.fc.weight.shape[0]:
            raise ValueError("embedding width does not match the head")
        return self.fc(embedding)


def top_patterns(attn: AttentionRecord, patterns: PatternSet, top_k: int,
                 row: int = 0) -> list[dict]:
    """Rank one instance's patterns by final-layer, head-averaged class-token attention.

    Ties go to the lower pattern index.
    """
    if not attn.class_token:
        raise ValueError("top_patterns requires a class token")
    scores = attn.scores()[row]
    if len(scores) != len(patterns):
        raise ValueError("attention record and pattern set disagree in size")
    order = np.lexsort((np.arange(len(scores)), -scores))[:top_k]
    return [{
        "index": int(i),
        "nodes": list(patterns.patterns[i].semantic.nodes),
        "anon": list(patterns.patterns[i].anonymous.labels),
        "score": float(scores[i]),
    } for i in order]


def export_interpretation(path: str | Path, instance, ranked: list[dict],
                          dot_path: str | Path | None = None):
    Path(path).write_text(json.dumps({"instance": instance, "patterns": ranked}, indent=1),
                          encoding="utf-8")
    if dot_path is not None:
        lines = ["graph patterns {"]
        for r, item in enumerate(ranked):
            lines.append(f"  subgraph cluster_{r} {{ label=\"#{r} score={item['score']:.4f}\";")
            nodes = item["nodes"]
            for a, b in zip(nodes, nodes[1:]):
                lines.append(f"    \"p{r}_{a}\" -- \"p{r}_{b}\";")
            lines.append("  }")
        lines.append("}")
        Path(dot_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
