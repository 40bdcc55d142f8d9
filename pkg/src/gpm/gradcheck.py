"""Finite-difference checks for every differentiable primitive and a tiny model.

Each case maps fp64 inputs to a tensor; the checked scalar is its inner
product with a fixed random projection. The error of a case is
``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class Case:
    name: str
    fn: Callable[..., Tensor]
    shapes: list[tuple[int, ...]]
    linear: bool = False
    positive: bool = False


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_case(case: Case, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in case.shapes]
    if case.positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    probe = None

    def value() -> float:
        out = case.fn(*[Tensor(a) for a in arrays])
        return float(np.sum(out.data * probe))

    with ag.no_grad():
        shape = case.fn(*[Tensor(a) for a in arrays]).shape
    probe = np.random.default_rng(seed + 1).standard_normal(shape)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with ag.Tape() as tape:
        out = case.fn(*leaves)
        loss = ag.sum_(ag.mul(out, probe))
    tape.backward(loss)
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        with ag.no_grad():
            numeric = numeric_grad(value, arr)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _mask(shape, seed=3):
    m = np.random.default_rng(seed).random(shape) < 0.7
    m[..., 0] = True
    return m


def _gru(x, h, wx, wh, bx, bh):
    return ag.gru_cell(x, h, wx, wh, bx, bh, mask=np.array([True, False, True]))


def _attention(q, k, v):
    out, _ = ag.scaled_dot_product_attention(q, k, v, key_mask=_mask((2, 1, 1, 4))[:, :, :1])
    return out


def _dropout(a):
    return ag.dropout(a, 0.3, np.random.default_rng(11), training=True)


def primitive_cases() -> list[Case]:
    return [
        Case("add", ag.add, [(3, 4), (4,)], linear=True),
        Case("neg", ag.neg, [(3, 4)], linear=True),
        Case("mul", ag.mul, [(3, 4), (3, 1)], linear=True),
        Case("sigmoid", ag.sigmoid, [(3, 4)]),
        Case("tanh", ag.tanh, [(3, 4)]),
        Case("gelu", ag.gelu, [(3, 4)]),
        Case("abs", ag.abs_, [(3, 4)], positive=True),
        Case("dropout", _dropout, [(3, 4)], linear=True),
        Case("reshape", lambda a: ag.reshape(a, (4, 3)), [(3, 4)], linear=True),
        Case("transpose", lambda a: ag.transpose(a, (1, 0, 2)), [(2, 3, 4)], linear=True),
        Case("concat", lambda a, b: ag.concat([a, b], axis=1), [(2, 3), (2, 2)], linear=True),
        Case("take", lambda a: ag.take(a, 1, axis=1), [(2, 3, 4)], linear=True),
        Case("slice_axis", lambda a: ag.slice_axis(a, 1, 3, axis=1), [(2, 4)], linear=True),
        Case("broadcast_to", lambda a: ag.broadcast_to(a, (3, 2, 4)), [(1, 2, 4)], linear=True),
        Case("sum", lambda a: ag.sum_(a, axis=0), [(3, 4)], linear=True),
        Case("mean", lambda a: ag.mean(a, axis=1, keepdims=True), [(3, 4)], linear=True),
        Case("masked_mean", lambda a: ag.masked_mean(a, _mask((3, 4)), axis=1), [(3, 4, 2)],
             linear=True),
        Case("matmul", ag.matmul, [(2, 3, 4), (4, 5)], linear=True),
        Case("linear", ag.linear, [(2, 3, 4), (4, 5), (5,)], linear=True),
        Case("softmax", lambda a: ag.softmax(a, mask=_mask((3, 5))), [(3, 5)]),
        Case("log_softmax", ag.log_softmax, [(3, 5)]),
        Case("layer_norm", ag.layer_norm, [(3, 6), (6,), (6,)]),
        Case("gru_cell", _gru, [(3, 4), (3, 5), (4, 15), (5, 15), (15,), (15,)]),
        Case("attention", _attention, [(2, 2, 3, 4), (2, 2, 4, 4), (2, 2, 4, 3)]),
        Case("label_smoothed_ce", lambda a: ag.label_smoothed_ce(a, [0, 2, 1], 0.1), [(3, 4)]),
        Case("l1_loss", lambda a: ag.l1_loss(a, np.zeros(5)), [(5,)], positive=True),
    ]


def check_model(seed: int = 0, semantic_kind: str = "transformer",
                anonymous_kind: str = "gru", class_token: bool = True) -> float:
    """Gradient of a label-smoothed loss through a tiny full model, all parameters."""
    from .encoder import EncoderConfig
    from .identifier import IdentifierConfig
    from .model import GPM
    from .tokenizer import PAD

    rng = np.random.default_rng(seed)
    enc = EncoderConfig(semantic_kind, anonymous_kind, hidden_dim=8, lam=0.5, max_len=4, heads=2)
    idc = IdentifierConfig(layers=2, heads=2, use_class_token=class_token,
                           readout="class_token" if class_token else "mean")
    model = GPM(enc, idc, in_dim=3, out_dim=3, seed=seed, dtype=np.float64)
    nodes = rng.integers(0, 4, size=(2, 3, 5))
    nodes[0, 1, 3:] = PAD
    nodes[1, 2, 2:] = PAD
    steps = rng.standard_normal((2, 3, 5, 3)) * (nodes != PAD)[..., None]
    y = np.array([0, 2])
    params = model.named_parameters()

    def loss_value() -> float:
        with ag.no_grad():
            out, _ = model(steps, nodes)
            return float(ag.label_smoothed_ce(out, y, 0.05).data)

    with ag.Tape() as tape:
        out, _ = model(steps, nodes)
        loss = ag.label_smoothed_ce(out, y, 0.05)
    tape.backward(loss)
    worst = 0.0
    for p in params.values():
        numeric = numeric_grad(loss_value, p.data)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def run_suite(seed: int = 0) -> dict:
    """Every case's error plus the end-to-end model; ``ok`` applies both tolerances."""
    results = {}
    for case in primitive_cases():
        results[case.name] = {"rel_error": check_case(case, seed), "linear": case.linear}
    results["model"] = {"rel_error": check_model(seed), "linear": False}
    results["model_gru_mean"] = {"rel_error": check_model(seed, "gru", "mean", False),
                                 "linear": False}
    results["model_mean"] = {"rel_error": check_model(seed, "mean", "gru", False),
                             "linear": False}
    worst = max(r["rel_error"] for r in results.values())
    worst_linear = max(r["rel_error"] for r in results.values() if r["linear"])
    ok = worst < 1e-3 and worst_linear < 1e-6
    return {"cases": results, "max_rel_error": worst, "max_rel_error_linear": worst_linear,
            "ok": ok}
