"""The full pattern machine: encoder, identifier and head."""

from __future__ import annotations

import json
from enum import Enum
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import EncoderConfig, FeatureTables, PatternEncoder
from .identifier import AttentionRecord, IdentifierConfig, PatternIdentifier, PredictionHead
from .nn import Module

_CKPT_MAGIC = b"GPMCKPT1"


class Task(str, Enum):
    NODE_CLF = "node_clf"
    LINK_PRED = "link_pred"
    GRAPH_CLF = "graph_clf"
    GRAPH_REG = "graph_reg"

    @property
    def is_regression(self) -> bool:
        return self is Task.GRAPH_REG


class GPM(Module):
    def __init__(self, enc_cfg: EncoderConfig, id_cfg: IdentifierConfig, in_dim: int,
                 out_dim: int, seed: int = 0, dtype=np.float32):
        if enc_cfg.hidden_dim % id_cfg.heads:
            raise ValueError("identifier heads must divide hidden_dim")
        rng = np.random.default_rng([seed, 1])
        # dropout masks draw from their own stream so parameter init stays fixed
        self.dropout_rng = np.random.default_rng([seed, 2])
        self.enc_cfg, self.id_cfg = enc_cfg, id_cfg
        self.in_dim, self.out_dim = in_dim, out_dim
        self.encoder = PatternEncoder(enc_cfg, in_dim, rng, self.dropout_rng, dtype)
        self.identifier = PatternIdentifier(id_cfg, enc_cfg.hidden_dim, rng, self.dropout_rng,
                                            dtype)
        self.head = PredictionHead(enc_cfg.hidden_dim, out_dim, rng, dtype)

    @property
    def dtype(self):
        return self.head.fc.weight.dtype

    def embed_patterns(self, steps: np.ndarray, nodes: np.ndarray) -> Tensor:
        """``steps`` ``(B, k, T, d)`` and ``nodes`` ``(B, k, T)`` -> ``(B, k, H)``."""
        B, k, T, d = steps.shape
        flat = self.encoder(steps.reshape(B * k, T, d), nodes.reshape(B * k, T))
        return ag.reshape(flat, (B, k, flat.shape[-1]))

    def __call__(self, steps: np.ndarray, nodes: np.ndarray) -> tuple[Tensor, AttentionRecord]:
        p = self.embed_patterns(steps.astype(self.dtype, copy=False), nodes)
        transformed, record = self.identifier(p)
        return self.head(self.identifier.readout(transformed)), record

    def forward_patterns(self, tables: FeatureTables, nodes: np.ndarray, arcs: np.ndarray):
        return self(tables.steps(nodes, arcs, self.dtype), nodes)


def predict(embedding: Tensor, head: PredictionHead, task: Task) -> Tensor:
    out = head(embedding)
    expected = 1 if task.is_regression else (2 if task is Task.LINK_PRED else None)
    if expected is not None and head.out_dim != expected:
        raise ValueError(f"head width {head.out_dim} does not fit task {task.value}")
    return out


def save_checkpoint(model: GPM, path: str | Path, meta: dict | None = None):
    """Binary checkpoint: magic, JSON header (names, shapes, dtype, meta), raw LE values."""
    state = model.state_dict()
    header = {
        "dtype": str(np.dtype(model.dtype)),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(np.uint64(len(head)).astype("<u8").tobytes())
        fh.write(head)
        le = np.dtype(header["dtype"]).newbyteorder("<")
        for v in state.values():
            fh.write(np.ascontiguousarray(v, dtype=le).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    hlen = int(np.frombuffer(buf[8:16], "<u8")[0])
    header = json.loads(buf[16:16 + hlen])
    dt = np.dtype(header["dtype"]).newbyteorder("<")
    pos = 16 + hlen
    state = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.dtype(header["dtype"]))
        pos += count * dt.itemsize
    return state, header
