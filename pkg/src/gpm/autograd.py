"""Dense tensors with tape-based reverse-mode differentiation.

Operations record onto the active :class:`Tape` (one per thread) whenever an
input requires a gradient. ``Tape.backward`` walks the record in reverse, which
is a valid topological order because every op is appended after its inputs.

Example:
    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_state = threading.local()


def _tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records: list[Tensor] = []

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf needing it."""
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent.grad = pg.astype(parent.data.dtype) if parent.grad is None \
                        else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        self.records.clear()


class no_grad:
    """Context that suspends recording, e.g. for evaluation."""

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(None)

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind != "f":
        arr = arr.astype(dtype or np.float32)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tape = _tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._tape = tape
        tape.records.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1 - t * t),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))

    def back(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)
    return _make(x * cdf, (a,), back)


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept entries are scaled by ``1 / (1 - p)``."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    def back(g):
        out = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)
    return _make(np.take(a.data, index, axis=axis), (a,), back)


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def back(g):
        out = np.zeros_like(a.data)
        out[sl] = g
        return (out,)
    return _make(a.data[sl], (a,), back)


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def masked_mean(a: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Mean over ``axis`` counting only entries where ``mask`` is true.

    ``mask`` has the shape of ``a`` without its last (feature) axis.
    """
    w = mask.astype(a.dtype)
    denom = np.maximum(w.sum(axis=axis, keepdims=True), 1.0)
    w = (w / denom)[..., None]
    return sum_(mul(a, w), axis=axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb
    return _make(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(*lead, w.shape[-1]), parents, back)


# ---------------------------------------------------------------------------
# normalization and softmax


def softmax(a: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax with optional boolean ``mask`` (true = keep).

    Masked positions get exactly zero weight.

    Raises:
        ValueError: if every entry along ``axis`` is masked for some row.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if np.any(~mask.any(axis=axis)):
            raise ValueError("softmax row with every entry masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _make(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def back(g):
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return _make(out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# recurrent cell


def gru_cell(x: Tensor, h: Tensor, w_x: Tensor, w_h: Tensor, b_x: Tensor, b_h: Tensor,
             mask: np.ndarray | None = None) -> Tensor:
    """One GRU step over rows of ``x`` (n, d) and ``h`` (n, H).

    Gate layout in the stacked weights is (reset, update, candidate):
    ``r = sig(.)``, ``z = sig(.)``, ``c = tanh(x W_c + b_c + r * (h U_c + b'_c))``,
    ``h' = (1 - z) * c + z * h``. Rows where ``mask`` is false keep ``h``.
    """
    H = h.shape[-1]
    gx = x.data @ w_x.data + b_x.data
    gh = h.data @ w_h.data + b_h.data
    r = _sigmoid(gx[:, :H] + gh[:, :H])
    z = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    ghc = gh[:, 2 * H:]
    c = np.tanh(gx[:, 2 * H:] + r * ghc)
    hn = (1 - z) * c + z * h.data
    m = None if mask is None else mask.astype(h.dtype)[:, None]
    out = hn if m is None else m * hn + (1 - m) * h.data

    def back(g):
        dhn = g if m is None else g * m
        dh = dhn * z if m is None else dhn * z + g * (1 - m)
        dc = dhn * (1 - z)
        dz = dhn * (h.data - c)
        dpc = dc * (1 - c * c)
        dr = dpc * ghc
        dpr = dr * r * (1 - r)
        dpz = dz * z * (1 - z)
        dgx = np.concatenate([dpr, dpz, dpc], axis=1)
        dgh = np.concatenate([dpr, dpz, dpc * r], axis=1)
        dx = dgx @ w_x.data.T
        dh = dh + dgh @ w_h.data.T
        return dx, dh, x.data.T @ dgx, h.data.T @ dgh, dgx.sum(0), dgh.sum(0)
    return _make(out, (x, h, w_x, w_h, b_x, b_h), back)


# ---------------------------------------------------------------------------
# attention and losses


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 key_mask: np.ndarray | None = None,
                                 dropout_p: float = 0.0, rng=None,
                                 training: bool = False) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes.

    ``key_mask`` (true = attend) broadcasts against the score matrix.
    Returns the output and the attention weights (before dropout).
    """
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                 1.0 / math.sqrt(d))
    weights = softmax(scores, mask=key_mask)
    return matmul(dropout(weights, dropout_p, rng, training), v), weights


def label_smoothed_ce(logits: Tensor, target, eps: float = 0.0) -> Tensor:
    """Mean cross-entropy against ``q_c = (1 - eps) 1[c = y] + eps / C``.

    ``logits`` is ``(C,)`` or ``(B, C)``; ``target`` is a class id or ``(B,)``.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    single = logits.ndim == 1
    x = logits.data[None] if single else logits.data
    y = np.atleast_1d(np.asarray(target, dtype=np.int64))
    B, C = x.shape
    if y.shape != (B,) or y.min() < 0 or y.max() >= C:
        raise ValueError("invalid class id for label-smoothed cross-entropy")
    q = np.full((B, C), eps / C, dtype=x.dtype)
    q[np.arange(B), y] += 1.0 - eps
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -(q * logp).sum() / B

    def back(g):
        grad = (np.exp(logp) - q) * (g / B)
        return (grad[0] if single else grad,)
    return _make(np.asarray(loss, dtype=x.dtype), (logits,), back)


def l1_loss(pred: Tensor, target) -> Tensor:
    diff = add(pred, as_tensor(-np.asarray(target, dtype=pred.dtype)))
    return mean(abs_(diff))
