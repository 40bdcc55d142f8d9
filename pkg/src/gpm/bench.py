"""Synthetic datasets, structural oracles and the end-to-end experiment harnesses."""

from __future__ import annotations

import hashlib
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .graph import Graph, GraphBatch, InstanceKind
from .identifier import IdentifierConfig, PatternIdentifier
from .tokenizer import presample
from .train import (RunConfig, Split, TaskData, evaluate, graph_task, link_task, node_task,
                    train)


# ---------------------------------------------------------------------------
# generators


@dataclass(frozen=True)
class CSLSpec:
    n: int = 41
    skips: tuple[int, ...] = (2, 3, 5, 6, 9)
    copies_per_class: int = 12

    def validate(self):
        if len(set(self.skips)) != len(self.skips):
            raise ValueError("skips must be distinct")
        for r in self.skips:
            if not 1 < r < self.n / 2:
                raise ValueError(f"skip {r} must satisfy 1 < r < n/2")
        if self.copies_per_class < 1:
            raise ValueError("copies_per_class must be positive")


@dataclass(frozen=True)
class TreeMatchSpec:
    radius: int = 4
    examples: int = 200
    num_labels: int = 4
    variant: str = "key"  # or "degree": keys are carried by pendant-node counts

    def validate(self):
        if self.radius < 2:
            raise ValueError("radius must be at least 2")
        if self.examples < 1 or self.num_labels < 1:
            raise ValueError("examples and num_labels must be positive")
        if self.variant not in ("key", "degree"):
            raise ValueError(f"unknown TreeMatch variant {self.variant!r}")


@dataclass(frozen=True)
class SBMSpec:
    blocks: int = 3
    nodes_per_block: int = 100
    p_in: float = 0.05
    p_out: float = 0.005
    feature_dim: int = 8
    feature_separation: float = 1.0

    def validate(self):
        if not (0 <= self.p_in <= 1 and 0 <= self.p_out <= 1):
            raise ValueError("edge probabilities must lie in [0, 1]")
        if self.blocks < 1 or self.nodes_per_block < 1 or self.feature_dim < 1:
            raise ValueError("counts must be positive")


@dataclass
class Dataset:
    name: str
    graphs: list[Graph]
    spec: dict
    seed: int
    extra: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        hashes = [g.content_hash() for g in self.graphs]
        digest = hashlib.sha256("".join(hashes).encode()).hexdigest()[:16]
        return {"dataset": self.name, "spec": self.spec, "seed": self.seed,
                "graph_hashes": hashes, "dataset_hash": digest}


def circulant(n: int, skip: int) -> np.ndarray:
    i = np.arange(n)
    return np.concatenate([np.stack([i, (i + 1) % n], 1), np.stack([i, (i + skip) % n], 1)])


def gen_csl(spec: CSLSpec = CSLSpec(), seed: int = 0) -> Dataset:
    """Skip-circulant graphs, one class per skip, randomly relabeled copies.

    ``extra["perms"][j]`` maps base node ``i`` to ``perms[j][i]`` in graph ``j``.
    """
    spec.validate()
    rng = np.random.default_rng([seed, 101])
    bases = [circulant(spec.n, r) for r in spec.skips]
    walks = [closed_walk_counts(Graph.from_edges(spec.n, e), 10) for e in bases]
    for i in range(len(walks)):
        for j in range(i):
            if walks[i] == walks[j]:
                raise ValueError(f"skips {spec.skips[j]} and {spec.skips[i]} give "
                                 "indistinguishable circulants")
    graphs, perms = [], []
    ones = np.ones((spec.n, 1))
    for label, edges in enumerate(bases):
        for _ in range(spec.copies_per_class):
            perm = rng.permutation(spec.n)
            graphs.append(Graph.from_edges(spec.n, perm[edges], node_features=ones,
                                           graph_label=label))
            perms.append(perm)
    return Dataset("csl", graphs, asdict(spec), seed, {"perms": perms})


def gen_tree_match(spec: TreeMatchSpec = TreeMatchSpec(), seed: int = 0) -> Dataset:
    """Complete binary trees whose root must recover the label of its key-matching leaf.

    Node 0 is the root; children of ``i`` are ``2i + 1`` and ``2i + 2``. In the
    ``key`` variant features are ``[one-hot key | one-hot label]``: leaves carry
    both, the root only its key, internal nodes zeros. In the ``degree`` variant
    a key ``c`` is instead expressed as ``c + 1`` featureless pendant neighbors
    (on the leaf and on the root) and leaves carry only their label.
    Labels are ``0 .. num_labels - 1``; non-root nodes get label -1.
    """
    spec.validate()
    rng = np.random.default_rng([seed, 102])
    r, C = spec.radius, spec.num_labels
    leaves_n = 2 ** r
    tree_n = 2 ** (r + 1) - 1
    first_leaf = tree_n - leaves_n
    child = np.arange(1, tree_n)
    tree_edges = np.stack([(child - 1) // 2, child], 1)
    graphs, answers = [], []
    for _ in range(spec.examples):
        keys = rng.permutation(leaves_n)
        labels = rng.integers(0, C, size=leaves_n)
        root_key = int(rng.integers(0, leaves_n))
        y = int(labels[np.flatnonzero(keys == root_key)[0]])
        if spec.variant == "key":
            x = np.zeros((tree_n, leaves_n + C))
            x[first_leaf + np.arange(leaves_n), keys] = 1.0
            x[first_leaf + np.arange(leaves_n), leaves_n + labels] = 1.0
            x[0, root_key] = 1.0
            edges, n = tree_edges, tree_n
        else:
            owners = [0] * (root_key + 1)
            for j in range(leaves_n):
                owners += [first_leaf + j] * (int(keys[j]) + 1)
            n = tree_n + len(owners)
            pend = np.stack([np.asarray(owners), tree_n + np.arange(len(owners))], 1)
            edges = np.concatenate([tree_edges, pend])
            x = np.zeros((n, C))
            x[first_leaf + np.arange(leaves_n), labels] = 1.0
        node_labels = np.full(n, -1)
        node_labels[0] = y
        graphs.append(Graph.from_edges(n, edges, node_features=x, node_labels=node_labels))
        answers.append(y)
    return Dataset("tree_match", graphs, asdict(spec), seed, {"labels": answers})


def gen_sbm(spec: SBMSpec = SBMSpec(), seed: int = 0) -> Graph:
    """Stochastic block model; features are ``N(mu_y, I)`` with ``mu_c = s * e_(c mod d)``."""
    spec.validate()
    rng = np.random.default_rng([seed, 103])
    n = spec.blocks * spec.nodes_per_block
    y = np.repeat(np.arange(spec.blocks), spec.nodes_per_block)
    prob = np.where(y[:, None] == y[None, :], spec.p_in, spec.p_out)
    draw = np.triu(rng.random((n, n)) < prob, 1)
    mu = np.zeros((spec.blocks, spec.feature_dim))
    mu[np.arange(spec.blocks), np.arange(spec.blocks) % spec.feature_dim] = \
        spec.feature_separation
    x = mu[y] + rng.standard_normal((n, spec.feature_dim))
    return Graph.from_edges(n, np.argwhere(draw), node_features=x, node_labels=y)


def gen_random_graph(n: int, avg_degree: float, seed: int = 0) -> Graph:
    """Uniform random multigraph draws, deduplicated; used for timing sweeps."""
    rng = np.random.default_rng([seed, 104])
    m = int(n * avg_degree / 2)
    pairs = rng.integers(0, n, size=(m, 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    # chain every node in so no node is isolated
    ring = np.stack([np.arange(n), (np.arange(n) + 1) % n], 1)
    edges = np.unique(np.sort(np.concatenate([pairs, ring]), axis=1), axis=0)
    return Graph.from_edges(n, edges)


# ---------------------------------------------------------------------------
# oracles


def wl1_refine(g: Graph, rounds: int | None = None) -> Counter:
    """Histogram of 1-WL colors after ``rounds`` refinements (default ``num_nodes``).

    Colors are content hashes, so histograms of different graphs refined for
    the same number of rounds are directly comparable.
    """
    rounds = g.num_nodes if rounds is None else rounds
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    if g.node_features is None:
        colors = ["0"] * g.num_nodes
    else:
        colors = [hashlib.blake2b(row.tobytes(), digest_size=8).hexdigest()
                  for row in g.node_features]
    for _ in range(rounds):
        new = []
        for v in range(g.num_nodes):
            sig = colors[v] + "|" + ",".join(sorted(colors[u] for u in g.neighbors(v)))
            new.append(hashlib.blake2b(sig.encode(), digest_size=8).hexdigest())
        colors = new
    return Counter(colors)


def wl_indistinguishable(graphs: Sequence[Graph], rounds: int | None = None) -> bool:
    rounds = max(g.num_nodes for g in graphs) if rounds is None else rounds
    hists = [wl1_refine(g, rounds) for g in graphs]
    return all(h == hists[0] for h in hists[1:])


def triangle_counts(g: Graph) -> np.ndarray:
    a = g.adjacency()
    return np.rint(np.diag(a @ a @ a) / 2).astype(np.int64)


def closed_walk_counts(g: Graph, max_len: int) -> list[int]:
    """``tr(A^l)`` for ``l = 1 .. max_len`` in exact integer arithmetic."""
    a = g.adjacency().astype(object)
    out, power = [], np.eye(g.num_nodes, dtype=np.int64).astype(object)
    for _ in range(max_len):
        power = power.dot(a)
        out.append(int(np.trace(power)))
    return out


def majority_baseline(y: np.ndarray) -> float:
    return float(np.bincount(y).max() / len(y))


# ---------------------------------------------------------------------------
# harnesses


def _fit(cfg: RunConfig, data: TaskData, k: int, workers: int, eval_rows=None, stop_at=None):
    cache = data.presample(k, cfg.scales, cfg.bias, seed=cfg.seed, workers=workers)
    res = train(cfg, data, cache, eval_rows=eval_rows, stop_at=stop_at)
    return res, cache


def _score(res, data: TaskData, cache, cfg: RunConfig, rows, k: int | None = None):
    return evaluate(res.model, res.tables, data, cache, rows, k or cfg.k_infer, cfg.hits_k,
                    cfg.eval_patterns, cfg.workers)


def csl_config(seed: int, **over) -> RunConfig:
    base = dict(task="graph_clf", m_train=64, k_infer=64, scales=[2, 4, 6, 8], hidden_dim=64,
                heads=4, lr=1e-3, dropout=0.0, batch_size=12, warmup_steps=30, epochs=150,
                patience=150, pe_kind="rwse", pe_dim=20, seed=seed)
    base.update(over)
    return RunConfig.from_dict(base)


def run_csl(seed: int = 0, workers: int = 1, spec: CSLSpec = CSLSpec(), **over) -> dict:
    """Train on CSL; ``wl_indistinguishable`` checks one graph per class."""
    ds = gen_csl(spec, seed)
    reps = [ds.graphs[c * spec.copies_per_class] for c in range(len(spec.skips))]
    cfg = csl_config(seed, workers=workers, **over)
    data = graph_task(ds.graphs, fractions=(0.6, 0.2, 0.2), seed=seed)
    res, cache = _fit(cfg, data, cfg.k_infer, workers)
    acc = _score(res, data, cache, cfg, data.split.test)
    return {"wl_indistinguishable": wl_indistinguishable(reps), "test_acc": acc,
            "best_val": res.best_metric, "epochs_run": len(res.history)}


def tree_match_config(radius: int, seed: int, **over) -> RunConfig:
    base = dict(task="node_clf", m_train=32, k_infer=128, scales=[2 * radius], p=10.0, q=1.0,
                hidden_dim=64, heads=4, lr=2e-3, dropout=0.0, batch_size=32, warmup_steps=30,
                epochs=500, patience=500, eval_every=5, seed=seed)
    base.update(over)
    return RunConfig.from_dict(base)


def run_tree_match(radius: int = 4, seed: int = 0, workers: int = 1, examples: int = 200,
                   **over) -> dict:
    """Fit every root label; the reported metric is training accuracy."""
    ds = gen_tree_match(TreeMatchSpec(radius=radius, examples=examples), seed)
    batch = GraphBatch.from_graphs(ds.graphs)
    roots = batch.offsets[:-1]
    all_rows = np.arange(len(roots))
    data = node_task(batch, nodes=roots, split=Split(all_rows, [], []))
    cfg = tree_match_config(radius, seed, workers=workers, **over)
    res, cache = _fit(cfg, data, cfg.k_infer, workers, eval_rows=all_rows, stop_at=1.0)
    acc = _score(res, data, cache, cfg, all_rows)
    epochs = next((h["epoch"] + 1 for h in res.history if h["val_metric"] == 1.0), None)
    return {"train_acc": acc, "epochs_to_fit": epochs, "epochs_run": len(res.history)}


def sbm_config(seed: int, **over) -> RunConfig:
    base = dict(task="node_clf", m_train=16, k_infer=128, scales=[2, 4, 6, 8], hidden_dim=64,
                heads=4, lr=1e-3, dropout=0.1, batch_size=64, warmup_steps=20, epochs=30,
                patience=30, seed=seed)
    base.update(over)
    return RunConfig.from_dict(base)


def run_sbm_node(seed: int = 0, workers: int = 1, spec: SBMSpec = SBMSpec(), **over) -> dict:
    """Node classification plus test accuracy at ``k = m_train`` and at ``k = k_infer``."""
    g = gen_sbm(spec, seed)
    data = node_task(g, seed=seed)
    cfg = sbm_config(seed, workers=workers, **over)
    res, cache = _fit(cfg, data, cfg.k_infer, workers)
    test = data.split.test
    acc = _score(res, data, cache, cfg, test)
    acc_m = _score(res, data, cache, cfg, test, cfg.m_train)
    return {"test_acc": acc, "test_acc_k_train": acc_m,
            "majority_baseline": majority_baseline(data.y[test])}


def link_config(seed: int, **over) -> RunConfig:
    base = dict(task="link_pred", m_train=16, k_infer=64, scales=[2, 4, 6, 8], hidden_dim=64,
                heads=4, lr=2e-3, dropout=0.1, batch_size=128, warmup_steps=20, epochs=10,
                patience=10, hits_k=10, seed=seed)
    base.update(over)
    return RunConfig.from_dict(base)


LINK_SBM = SBMSpec(blocks=10, nodes_per_block=30, p_in=0.3, p_out=0.005, feature_dim=10,
                   feature_separation=2.0)


def run_sbm_link(seed: int = 0, workers: int = 1, spec: SBMSpec = LINK_SBM,
                 eval_negatives: int = 200, **over) -> dict:
    """Hits@K against sampled negatives, with the expected score of random ranking."""
    g = gen_sbm(spec, seed)
    data = link_task(g, seed=seed, eval_negatives=eval_negatives)
    cfg = link_config(seed, workers=workers, **over)
    res, cache = _fit(cfg, data, cfg.k_infer, workers)
    hits = _score(res, data, cache, cfg, data.split.test)
    return {"test_hits": hits, "random_baseline": random_hits_baseline(eval_negatives, cfg.hits_k)}


def random_hits_baseline(num_negatives: int, k: int) -> float:
    """Expected Hits@K when every score is an independent continuous draw.

    A positive beats the K-th best of N negatives iff it ranks among the top K
    of ``N + 1`` exchangeable scores.
    """
    return k / (num_negatives + 1)


def time_epochs(cfg: RunConfig, data: TaskData, cache, m: int, epochs: int = 2) -> float:
    c = RunConfig.from_dict({**cfg.to_dict(), "m_train": m, "k_infer": cache.k, "epochs": epochs,
                             "eval_every": 10 ** 6})
    start = time.perf_counter()
    train(c, data, cache, eval_rows=np.zeros(0, dtype=np.int64))
    return (time.perf_counter() - start) / epochs


def run_tta_speed(seed: int = 0, spec: SBMSpec = SBMSpec(), k: int = 128, m: int = 16,
                  epochs: int = 2, **over) -> dict:
    """Per-epoch wall time training on ``m`` vs all ``k`` cached patterns."""
    g = gen_sbm(spec, seed)
    data = node_task(g, seed=seed)
    cfg = sbm_config(seed, k_infer=k, **over)
    cache = data.presample(k, cfg.scales, cfg.bias, seed=seed)
    t_m = time_epochs(cfg, data, cache, m, epochs)
    t_k = time_epochs(cfg, data, cache, k, epochs)
    return {"epoch_s_m": t_m, "epoch_s_k": t_k, "speedup": t_k / t_m}


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def _best_time(fn, repeats: int) -> float:
    fn()  # warm caches and allocator before timing
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def identifier_cost(ks: Sequence[int] = (16, 32, 64, 128), hidden: int = 256, heads: int = 4,
                    batch: int = 64, repeats: int = 20, seed: int = 0) -> dict:
    """Per-instance identifier wall time across pattern counts.

    ``attention`` times the pairwise pattern interaction (scores, softmax and
    weighted sum), the part whose size grows with the number of pattern pairs;
    ``full`` times the whole identifier layer including per-pattern projections.
    """
    rng = np.random.default_rng(seed)
    ident = PatternIdentifier(IdentifierConfig(heads=heads), hidden, rng, dtype=np.float64)
    ident.eval()
    d = hidden // heads
    # the first sweep in a process runs slow (page faults, clock ramp); discard it
    for sweep in range(2):
        attn, full = [], []
        for k in ks:
            x = rng.standard_normal((batch, k, hidden))
            q, kk, v = (ag.Tensor(rng.standard_normal((batch, heads, k, d))) for _ in range(3))
            with ag.no_grad():
                attn.append(_best_time(lambda: ag.scaled_dot_product_attention(q, kk, v),
                                       repeats) / batch)
                full.append(_best_time(lambda: ident(ag.Tensor(x)), repeats) / batch)
    return {"k": list(ks), "attention_s": attn, "full_s": full,
            "attention_exponent": loglog_slope(ks, attn), "full_exponent": loglog_slope(ks, full)}


def presample_cost(ns: Sequence[int] = (1000, 10000, 100000), k: int = 16,
                   scales: Sequence[int] = (2, 4, 6, 8), avg_degree: float = 8.0,
                   repeats: int = 2, seed: int = 0) -> dict:
    """Wall time to presample ``k`` patterns for every node of random graphs of size ``n``."""
    times = []
    for n in ns:
        g = gen_random_graph(n, avg_degree, seed)
        ids = np.arange(n)[:, None]
        times.append(_best_time(lambda: presample(g, (InstanceKind.NODE, ids), k, scales,
                                                  seed=seed), repeats))
    return {"n": list(ns), "seconds": times, "exponent": loglog_slope(ns, times)}


def run_scaling(seed: int = 0, quick: bool = False) -> dict:
    ns = (1000, 10000, 100000) if not quick else (1000, 3000, 10000)
    return {"identifier": identifier_cost(seed=seed), "presample": presample_cost(ns, seed=seed)}


def run_bench(seed: int = 0, workers: int = 1, quick: bool = False) -> dict:
    """All deterministic experiment metrics for one seed (no wall-clock numbers).

    ``quick`` shrinks epochs and datasets for smoke runs.
    """
    if quick:
        # small eval chunks and a multi-block node set keep the threaded paths exercised
        fast = dict(epochs=3, eval_patterns=1024)
        csl = run_csl(seed, workers, CSLSpec(copies_per_class=4), **fast)
        tree = run_tree_match(2, seed, workers, examples=20, **fast)
        node = run_sbm_node(seed, workers, SBMSpec(nodes_per_block=200), **fast)
        link = run_sbm_link(seed, workers, SBMSpec(blocks=4, nodes_per_block=20, p_in=0.3),
                            eval_negatives=40, **{**fast, "epochs": 2})
    else:
        csl = run_csl(seed, workers)
        tree = run_tree_match(4, seed, workers)
        node = run_sbm_node(seed, workers)
        link = run_sbm_link(seed, workers)
    return {"seed": seed, "csl": csl, "tree_match": tree, "sbm_node": node, "sbm_link": link}
