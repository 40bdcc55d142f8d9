"""AdamW with decoupled weight decay, global-norm clipping and linear warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: OptimizerState,
               lr: float | None = None) -> list[np.ndarray]:
    """One AdamW update, in place on ``params``; returns them for convenience."""
    lr = state.lr if lr is None else lr
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps)

    def step(self, lr: float | None = None):
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                             for g in grads if g is not None)))


def clip_grad_norm(grads: list[np.ndarray | None], max_norm: float) -> tuple[list, float]:
    """Scale all gradients by ``max_norm / norm`` when the global norm exceeds it.

    Returns the (possibly scaled) gradients and the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [None if g is None else g * np.asarray(scale, dtype=g.dtype) for g in grads]
    return grads, norm


def clip_params_grad(params: list[Tensor], max_norm: float) -> float:
    grads, norm = clip_grad_norm([p.grad for p in params], max_norm)
    for p, g in zip(params, grads):
        p.grad = g
    return norm


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    if step < 0:
        raise ValueError("step must be nonnegative")
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)
