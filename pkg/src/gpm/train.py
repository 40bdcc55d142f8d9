"""Tasks, training loop, test-time augmented inference and metrics."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .encoder import EncoderConfig, FeatureTables
from .graph import Graph, GraphBatch, InstanceKind
from .identifier import IdentifierConfig
from .model import GPM, Task
from .optim import AdamW, clip_params_grad, global_norm, warmup_lr
from .pe import compute_pe
from .tokenizer import BiasParams, PatternCache, presample, subsample

log = logging.getLogger(__name__)

# JSON keys that differ from the Python field names
_KEY_ALIASES = {"sp.kind": "sp_kind", "ap.kind": "ap_kind", "pe.kind": "pe_kind",
                "pe.dim": "pe_dim", "lambda": "lam"}
_FIELD_KEYS = {v: k for k, v in _KEY_ALIASES.items()}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: Task = Task.NODE_CLF
    m_train: int = 16
    k_infer: int = 128
    scales: tuple[int, ...] = (2, 4, 6, 8)
    p: float = 1.0
    q: float = 1.0
    lr: float = 1e-3
    dropout: float = 0.1
    weight_decay: float = 0.0
    batch_size: int = 256
    label_smoothing: float = 0.05
    clip_norm: float = 1.0
    warmup_steps: int = 100
    epochs: int = 100
    patience: int = 100
    seed: int = 0
    sp_kind: str = "transformer"
    ap_kind: str = "gru"
    lam: float = 1.0
    hidden_dim: int = 256
    heads: int = 4
    layers: int = 1
    use_class_token: bool = False
    readout: str = "mean"
    prenorm: bool = True
    pe_kind: str = "none"
    pe_dim: int = 0
    hits_k: int = 20
    eval_every: int = 1
    eval_patterns: int = 16384
    workers: int = 1

    def __post_init__(self):
        self.task = Task(self.task)
        self.scales = tuple(int(s) for s in self.scales)

    def validate(self, cache_k: int | None = None):
        positive = ("m_train", "k_infer", "batch_size", "epochs", "patience", "hidden_dim",
                    "heads", "layers", "eval_every", "eval_patterns", "workers")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.scales or min(self.scales) < 1:
            raise ConfigError("scales must be positive lengths")
        if self.m_train > self.k_infer:
            raise ConfigError("m_train must not exceed k_infer")
        if cache_k is not None and self.k_infer > cache_k:
            raise ConfigError(f"k_infer={self.k_infer} exceeds the cache's k={cache_k}")
        if self.hidden_dim % self.heads:
            raise ConfigError("heads must divide hidden_dim")
        if not 0 <= self.dropout < 1 or not 0 <= self.label_smoothing < 1:
            raise ConfigError("dropout and label_smoothing must lie in [0, 1)")
        if self.p <= 0 or self.q <= 0:
            raise ConfigError("p and q must be positive")
        if self.lam < 0 or self.lr <= 0:
            raise ConfigError("lambda must be nonnegative and lr positive")
        if self.readout == "class_token" and not self.use_class_token:
            raise ConfigError("class_token readout needs use_class_token")
        return self

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        kw = {}
        for key, val in obj.items():
            name = _KEY_ALIASES.get(key, key)
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            kw[name] = val
        try:
            return cls(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        out = {}
        for key, val in asdict(self).items():
            if isinstance(val, Task):
                val = val.value
            elif isinstance(val, tuple):
                val = list(val)
            out[_FIELD_KEYS.get(key, key)] = val
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def bias(self) -> BiasParams:
        return BiasParams(self.p, self.q)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.sp_kind, self.ap_kind, self.hidden_dim, self.lam,
                             max(self.scales), self.heads, self.dropout, self.prenorm)

    def identifier_config(self) -> IdentifierConfig:
        return IdentifierConfig(self.layers, self.heads, self.use_class_token, self.readout,
                                self.dropout, self.prenorm)


# ---------------------------------------------------------------------------
# tasks


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        parts = [np.asarray(a, dtype=np.int64) for a in (self.train, self.val, self.test)]
        self.train, self.val, self.test = parts
        allrows = np.concatenate(parts)
        if len(np.unique(allrows)) != len(allrows):
            raise ValueError("split parts overlap")

    @classmethod
    def random(cls, n: int, fractions: Sequence[float], rng: np.random.Generator) -> "Split":
        perm = rng.permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        return cls(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                   np.sort(perm[n_train + n_val:]))


@dataclass
class TaskData:
    task: Task
    source: Graph | GraphBatch
    kind: InstanceKind
    ids: np.ndarray
    y: np.ndarray
    split: Split
    num_outputs: int
    meta: dict = field(default_factory=dict)

    @property
    def graph(self) -> Graph:
        return self.source.union if isinstance(self.source, GraphBatch) else self.source

    def graph_hash(self) -> str:
        return self.graph.content_hash()

    def presample(self, k: int, scales: Sequence[int], bias: BiasParams | None = None,
                  seed: int = 0, workers: int = 1) -> PatternCache:
        return presample(self.source, (self.kind, self.ids), k, scales, bias, seed, workers)


def node_task(g: Graph | GraphBatch, nodes: np.ndarray | None = None,
              labels: np.ndarray | None = None, fractions=(0.6, 0.2, 0.2), seed: int = 0,
              split: Split | None = None) -> TaskData:
    """Node classification over ``nodes`` (default: every node with a neighbor)."""
    graph = g.union if isinstance(g, GraphBatch) else g
    if nodes is None:
        nodes = np.flatnonzero(graph.degrees > 0)
    nodes = np.asarray(nodes, dtype=np.int64)
    labels = graph.node_labels[nodes] if labels is None else np.asarray(labels)
    if labels is None:
        raise ValueError("node task needs labels")
    if split is None:
        split = Split.random(len(nodes), fractions, np.random.default_rng([seed, 11]))
    return TaskData(Task.NODE_CLF, g, InstanceKind.NODE, nodes[:, None], labels.astype(np.int64),
                    split, int(labels.max()) + 1)


def graph_task(graphs: Sequence[Graph], regression: bool = False, fractions=(0.8, 0.1, 0.1),
               seed: int = 0, split: Split | None = None) -> TaskData:
    batch = GraphBatch.from_graphs(graphs)
    y = batch.graph_labels
    if np.any(np.isnan(y.astype(np.float64))):
        raise ValueError("every graph needs a graph_label")
    if split is None:
        split = Split.random(batch.num_graphs, fractions, np.random.default_rng([seed, 12]))
    ids = np.arange(batch.num_graphs)[:, None]
    if regression:
        return TaskData(Task.GRAPH_REG, batch, InstanceKind.GRAPH, ids, y.astype(np.float64),
                        split, 1)
    y = y.astype(np.int64)
    return TaskData(Task.GRAPH_CLF, batch, InstanceKind.GRAPH, ids, y, split, int(y.max()) + 1)


def negative_sampling(g: Graph, count: int, rng: np.random.Generator,
                      forbidden: np.ndarray | None = None,
                      candidates: np.ndarray | None = None) -> np.ndarray:
    """``count`` distinct uniformly random non-edges ``(u, v)`` with ``u < v``.

    Pairs in ``forbidden`` (``(m, 2)``, either orientation) and every edge of
    ``g`` are excluded. ``candidates`` restricts the endpoint pool.

    Raises:
        ValueError: when fewer than ``count`` admissible pairs exist.
    """
    nodes = np.arange(g.num_nodes) if candidates is None else np.unique(candidates)
    n = g.num_nodes
    banned = set((g.arc_sources() * n + g.indices).tolist())
    if forbidden is not None and len(forbidden):
        f = np.asarray(forbidden, dtype=np.int64).reshape(-1, 2)
        banned.update((f[:, 0] * n + f[:, 1]).tolist())
        banned.update((f[:, 1] * n + f[:, 0]).tolist())
    in_pool = np.zeros(n, dtype=bool)
    in_pool[nodes] = True
    banned_in_pool = sum(1 for key in banned if in_pool[key // n] and in_pool[key % n]
                         and key // n < key % n)
    available = len(nodes) * (len(nodes) - 1) // 2 - banned_in_pool
    if count > available:
        raise ValueError(f"graph too dense: {count} negatives requested, {available} available")
    chosen: list[tuple[int, int]] = []
    seen = set()
    if count > available // 2:
        # dense regime: enumerate the complement and draw from it
        iu, iv = np.triu_indices(len(nodes), 1)
        keys = nodes[iu] * n + nodes[iv]
        keys = np.array([k for k in keys.tolist() if k not in banned], dtype=np.int64)
        pick = np.sort(rng.choice(len(keys), size=count, replace=False))
        keys = keys[pick]
        return np.stack([keys // n, keys % n], axis=1)
    while len(chosen) < count:
        need = count - len(chosen)
        a = nodes[rng.integers(0, len(nodes), size=2 * need + 8)]
        b = nodes[rng.integers(0, len(nodes), size=2 * need + 8)]
        for u, v in zip(a.tolist(), b.tolist()):
            if u == v:
                continue
            u, v = (u, v) if u < v else (v, u)
            key = u * n + v
            if key in banned or key in seen:
                continue
            seen.add(key)
            chosen.append((u, v))
            if len(chosen) == count:
                break
    return np.asarray(chosen, dtype=np.int64).reshape(-1, 2)


def link_task(g: Graph, fractions=(0.8, 0.05, 0.15), seed: int = 0, train_neg_ratio: int = 1,
              eval_negatives: int = 500) -> TaskData:
    """Link prediction with edge instances on the graph of training edges.

    Held-out edges are chosen so that no endpoint becomes isolated in the
    training graph (edge instances cannot start walks at isolated nodes).
    """
    rng = np.random.default_rng([seed, 13])
    edges = g.undirected_edges()
    edges = edges[edges[:, 0] != edges[:, 1]]
    order = rng.permutation(len(edges))
    n_val = int(round(fractions[1] * len(edges)))
    n_test = int(round(fractions[2] * len(edges)))
    deg = g.degrees.copy()
    held = []
    for i in order:
        if len(held) == n_val + n_test:
            break
        u, v = edges[i]
        if deg[u] > 1 and deg[v] > 1:
            deg[u] -= 1
            deg[v] -= 1
            held.append(i)
    if len(held) < n_val + n_test:
        raise ValueError("cannot hold out enough edges without isolating nodes")
    held = np.asarray(held)
    val_pos, test_pos = edges[held[:n_val]], edges[held[n_val:]]
    keep = np.ones(len(edges), dtype=bool)
    keep[held] = False
    train_pos = edges[keep]
    train_graph = Graph.from_edges(g.num_nodes, train_pos, node_features=g.node_features,
                                   node_labels=g.node_labels)
    live = np.flatnonzero(train_graph.degrees > 0)
    negs = negative_sampling(g, train_neg_ratio * len(train_pos) + 2 * eval_negatives, rng,
                             candidates=live)
    train_neg = negs[:train_neg_ratio * len(train_pos)]
    val_neg = negs[len(train_neg):len(train_neg) + eval_negatives]
    test_neg = negs[len(train_neg) + eval_negatives:]
    groups = [train_pos, train_neg, val_pos, val_neg, test_pos, test_neg]
    ids = np.concatenate(groups)
    y = np.concatenate([np.full(len(a), lab) for a, lab in zip(groups, [1, 0, 1, 0, 1, 0])])
    bounds = np.cumsum([0] + [len(a) for a in groups])
    rows = [np.arange(bounds[i], bounds[i + 1]) for i in range(6)]
    split = Split(np.concatenate(rows[0:2]), np.concatenate(rows[2:4]),
                  np.concatenate(rows[4:6]))
    return TaskData(Task.LINK_PRED, train_graph, InstanceKind.EDGE, ids, y.astype(np.int64),
                    split, 2, meta={"eval_negatives": eval_negatives})


# ---------------------------------------------------------------------------
# metrics


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("accuracy needs equal-length, nonempty inputs")
    return float(np.mean(preds == labels))


def mae(preds, targets) -> float:
    preds, targets = np.asarray(preds, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.size == 0:
        raise ValueError("mae needs equal-length, nonempty inputs")
    return float(np.mean(np.abs(preds - targets)))


def hits_at_k(pos_scores, neg_scores, k: int) -> float:
    """Share of positives scoring strictly above the ``k``-th best negative."""
    pos, neg = np.asarray(pos_scores, dtype=np.float64), np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("hits@k needs nonempty inputs")
    if k > neg.size:
        raise ValueError(f"k={k} exceeds the number of negatives ({neg.size})")
    threshold = np.sort(neg)[::-1][k - 1]
    return float(np.mean(pos > threshold))


# ---------------------------------------------------------------------------
# model construction and inference


class TrainingError(RuntimeError):
    pass


def build_model(cfg: RunConfig, data: TaskData, dtype=np.float32):
    pe = compute_pe(data.graph, cfg.pe_kind, cfg.pe_dim) if cfg.pe_dim else None
    tables = FeatureTables(data.graph, pe)
    model = GPM(cfg.encoder_config(), cfg.identifier_config(), tables.dim, data.num_outputs,
                seed=cfg.seed, dtype=dtype)
    return model, tables


def check_cache(cfg: RunConfig, data: TaskData, cache: PatternCache):
    if cache.kind is not data.kind or not np.array_equal(cache.ids, data.ids):
        raise ConfigError("pattern cache does not cover the task's instances")
    if cache.graph_hash != data.graph_hash():
        raise ConfigError("pattern cache was sampled on a different graph")
    if max(cache.scales) > max(cfg.scales):
        raise ConfigError("cache holds walks longer than the configured maximum scale")
    cfg.validate(cache.k)


def forward_rows(model: GPM, tables: FeatureTables, cache: PatternCache, rows: np.ndarray,
                 pattern_idx: np.ndarray | None = None, k: int | None = None):
    """Run the model on cache rows with chosen patterns (default: the first ``k``)."""
    if pattern_idx is None:
        k = cache.k if k is None else k
        if k > cache.k:
            raise ValueError(f"need {k} cached patterns, cache has {cache.k}")
        nodes = cache.nodes[rows, :k]
        arcs = cache.arcs[rows, :k]
    else:
        sel = (rows[:, None], pattern_idx)
        nodes, arcs = cache.nodes[sel], cache.arcs[sel]
    return model.forward_patterns(tables, nodes.astype(np.int64), arcs.astype(np.int64))


def infer(model: GPM, tables: FeatureTables, cache: PatternCache, rows: np.ndarray, k: int,
          eval_patterns: int = 16384, workers: int = 1) -> np.ndarray:
    """Model outputs for ``rows`` using ``k`` patterns each; batches are independent."""
    rows = np.asarray(rows, dtype=np.int64)
    per_batch = max(1, eval_patterns // k)
    chunks = [rows[i:i + per_batch] for i in range(0, len(rows), per_batch)]
    was_training = model.training
    model.eval()

    def run(chunk):
        with ag.no_grad():
            out, _ = forward_rows(model, tables, cache, chunk, k=k)
        return out.data

    try:
        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(workers) as pool:
                outs = list(pool.map(run, chunks))
        else:
            outs = [run(c) for c in chunks]
    finally:
        model.train(was_training)
    if not outs:
        return np.zeros((0, model.out_dim), dtype=model.dtype)
    return np.concatenate(outs)


def tta_infer(model: GPM, tables: FeatureTables, cache: PatternCache, rows, k_infer: int,
              task: Task, **kw) -> np.ndarray:
    """Predictions from ``k_infer`` cached patterns per instance.

    Classes for classification, scalars for regression, link scores otherwise.
    """
    if k_infer > cache.k:
        raise ValueError(f"cache holds {cache.k} patterns, {k_infer} requested")
    return outputs_to_predictions(infer(model, tables, cache, np.atleast_1d(rows), k_infer, **kw),
                                  task)


def outputs_to_predictions(out: np.ndarray, task: Task) -> np.ndarray:
    if task.is_regression:
        return out[:, 0]
    if task is Task.LINK_PRED:
        return out[:, 1] - out[:, 0]
    return out.argmax(axis=1)


def evaluate(model: GPM, tables: FeatureTables, data: TaskData, cache: PatternCache,
             rows: np.ndarray, k: int, hits_k: int = 20, eval_patterns: int = 16384,
             workers: int = 1) -> float:
    """Task metric on ``rows``: accuracy, MAE, or Hits@K for links."""
    preds = tta_infer(model, tables, cache, rows, k, data.task, eval_patterns=eval_patterns,
                      workers=workers)
    y = data.y[rows]
    if data.task.is_regression:
        return mae(preds, y)
    if data.task is Task.LINK_PRED:
        return hits_at_k(preds[y == 1], preds[y == 0], hits_k)
    return accuracy(preds, y)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: GPM
    tables: FeatureTables
    history: list[dict]
    best_epoch: int
    best_metric: float


def _better(task: Task, new: float, old: float | None) -> bool:
    if old is None:
        return True
    return new < old if task.is_regression else new > old


def _loss(cfg: RunConfig, data: TaskData, out, rows):
    if data.task.is_regression:
        return ag.l1_loss(ag.reshape(out, (out.shape[0],)), data.y[rows])
    return ag.label_smoothed_ce(out, data.y[rows], cfg.label_smoothing)


def train(cfg: RunConfig, data: TaskData, cache: PatternCache, *, dtype=np.float32,
          out_dir: str | Path | None = None, eval_rows: np.ndarray | None = None,
          stop_at: float | None = None) -> TrainResult:
    """Train with AdamW, warmup, clipping and early stopping on the validation metric.

    Each step draws ``m_train`` of the cached patterns per instance without
    replacement from an epoch-seeded generator. Validation uses the first
    ``k_infer`` cached patterns. ``eval_rows`` overrides the validation rows
    (e.g. training rows, for fitting experiments); ``stop_at`` ends training
    once the metric reaches that value. The best snapshot is restored before
    returning.
    """
    check_cache(cfg, data, cache)
    model, tables = build_model(cfg, data, dtype)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    val_rows = data.split.val if eval_rows is None else np.asarray(eval_rows)
    train_rows = data.split.train
    history: list[dict] = []
    best_metric, best_epoch, best_state = None, -1, model.state_dict()
    stale = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 7, epoch])
        order = train_rows[rng.permutation(len(train_rows))]
        model.train()
        losses, sizes = [], []
        lr = cfg.lr
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            pick = subsample(cache.k, len(rows), cfg.m_train, rng)
            with ag.Tape() as tape:
                out, _ = forward_rows(model, tables, cache, rows, pattern_idx=pick)
                loss = _loss(cfg, data, out, rows)
            if not np.isfinite(loss.data):
                _abort(model, rows, epoch, out_dir)
            tape.backward(loss)
            clip_params_grad(params, cfg.clip_norm)
            lr = warmup_lr(opt.state.step + 1, cfg.lr, cfg.warmup_steps)
            opt.step(lr)
            opt.zero_grad()
            losses.append(float(loss.data))
            sizes.append(len(rows))
        train_loss = float(np.average(losses, weights=sizes))
        entry = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_metric": None}
        if len(val_rows) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            metric = evaluate(model, tables, data, cache, val_rows, cfg.k_infer, cfg.hits_k,
                              cfg.eval_patterns, cfg.workers)
            entry["val_metric"] = metric
            if _better(data.task, metric, best_metric):
                best_metric, best_epoch, best_state = metric, epoch, model.state_dict()
                stale = 0
            else:
                stale += cfg.eval_every
        history.append(entry)
        log.debug("epoch %d loss %.5f val %s", epoch, train_loss, entry["val_metric"])
        if stale >= cfg.patience:
            break
        if stop_at is not None and best_metric is not None and (
                best_metric <= stop_at if data.task.is_regression else best_metric >= stop_at):
            break
    if best_epoch >= 0:
        model.load_state_dict(best_state)
    if out_dir is not None:
        write_history(history, Path(out_dir) / "history.jsonl")
    return TrainResult(model, tables, history, best_epoch,
                       float("nan") if best_metric is None else best_metric)


def _abort(model: GPM, rows: np.ndarray, epoch: int, out_dir):
    diag = {
        "epoch": epoch,
        "batch_rows": rows.tolist(),
        "param_norms": {k: global_norm([v.data]) for k, v in model.named_parameters().items()},
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "nan_dump.json").write_text(json.dumps(diag), encoding="utf-8")
    raise TrainingError(f"non-finite loss at epoch {epoch}; diagnostics: {json.dumps(diag)[:400]}")


def write_history(history: list[dict], path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry) + "\n")


def make_task(task: Task | str, source: Graph | Sequence[Graph], seed: int = 0) -> TaskData:
    """Default task construction from a loaded graph or graph list; splits follow ``seed``."""
    task = Task(task)
    if task in (Task.GRAPH_CLF, Task.GRAPH_REG):
        if isinstance(source, Graph):
            raise ConfigError("graph-level tasks need a list of graphs")
        return graph_task(source, regression=task is Task.GRAPH_REG, seed=seed)
    if not isinstance(source, Graph):
        raise ConfigError(f"task {task.value} needs a single graph")
    if task is Task.LINK_PRED:
        return link_task(source, seed=seed)
    return node_task(source, seed=seed)
