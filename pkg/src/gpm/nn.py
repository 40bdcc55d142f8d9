"""Layers built on the autograd primitives."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Parameter container; parameters are discovered from attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on {sorted(missing)}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {state[k].shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32):
        bound = 1.0 / math.sqrt(max(d_in, 1))
        self.weight = _param(rng.uniform(-bound, bound, (d_in, d_out)), dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gamma = _param(np.ones(d), dtype)
        self.beta = _param(np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta)


class GRU(Module):
    """Forward single-layer GRU that returns the final hidden state."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        self.w_x = _param(rng.uniform(-bound, bound, (d_in, 3 * hidden)), dtype)
        self.w_h = _param(rng.uniform(-bound, bound, (hidden, 3 * hidden)), dtype)
        self.b_x = _param(rng.uniform(-bound, bound, 3 * hidden), dtype)
        self.b_h = _param(rng.uniform(-bound, bound, 3 * hidden), dtype)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """``x`` is ``(n, T, d)``; ``mask`` ``(n, T)`` marks real steps."""
        n, T = x.shape[:2]
        h = ag.Tensor(np.zeros((n, self.hidden), dtype=x.dtype))
        for t in range(T):
            if not mask[:, t].any():
                break
            h = ag.gru_cell(ag.take(x, t, axis=1), h, self.w_x, self.w_h, self.b_x, self.b_h,
                            mask=mask[:, t])
        return h


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0,
                 dropout_rng: np.random.Generator | None = None, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide the hidden size ({dim})")
        self.heads = heads
        self.q = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.k = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.v = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.out = Linear(dim, dim, rng, dtype=dtype)
        self.dropout = dropout
        self.dropout_rng = dropout_rng

    def _split(self, x: Tensor) -> Tensor:
        n, s, d = x.shape
        return ag.transpose(ag.reshape(x, (n, s, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """``x`` is ``(n, s, d)``; ``key_mask`` ``(n, s)`` marks attendable rows."""
        n, s, d = x.shape
        mask = None if key_mask is None else key_mask[:, None, None, :]
        out, weights = ag.scaled_dot_product_attention(
            self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x)), mask,
            self.dropout, self.dropout_rng, self.training)
        merged = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (n, s, d))
        return self.out(merged), weights


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dropout: float = 0.0,
                 dropout_rng: np.random.Generator | None = None, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)
        self.dropout = dropout
        self.dropout_rng = dropout_rng

    def __call__(self, x: Tensor) -> Tensor:
        h = ag.dropout(ag.gelu(self.fc1(x)), self.dropout, self.dropout_rng, self.training)
        return self.fc2(h)


class TransformerBlock(Module):
    """Self-attention block over a set or sequence of rows.

    With ``prenorm`` the block is ``A = X + Attn(LN(X)); out = A + FFN(LN(A))``.
    Without it the block is exactly ``out = FFN(X + Attn(X))``.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0,
                 dropout_rng: np.random.Generator | None = None, prenorm: bool = True,
                 ffn_mult: int = 2, dtype=np.float32):
        self.attn = MultiHeadAttention(dim, heads, rng, dropout, dropout_rng, dtype)
        self.ffn = FeedForward(dim, ffn_mult * dim, rng, dropout, dropout_rng, dtype)
        self.prenorm = prenorm
        if prenorm:
            self.norm1 = LayerNorm(dim, dtype)
            self.norm2 = LayerNorm(dim, dtype)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        if not self.prenorm:
            a, w = self.attn(x, key_mask)
            return self.ffn(ag.add(x, a)), w
        a, w = self.attn(self.norm1(x), key_mask)
        h = ag.add(x, a)
        return ag.add(h, self.ffn(self.norm2(h))), w


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)
