"""Command-line entry point: ``gpm <command> [flags]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .graph import GraphFormatError, InstanceRef, dump_graphs, load_graph
from .model import load_checkpoint, save_checkpoint
from .tokenizer import PatternCache
from .train import (ConfigError, RunConfig, TrainingError, build_model, check_cache, evaluate,
                    make_task, train, write_history)

log = logging.getLogger("gpm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _need_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(_need_file(args.config, "config")) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        over["workers"] = args.workers
    if getattr(args, "task", None):
        over["task"] = args.task
    if over:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **over})
    return cfg.validate()


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> dict:
    out = Path(args.out)
    if args.dataset == "csl":
        skips = tuple(args.skips) if args.skips else bench.CSLSpec().skips[:args.classes]
        if len(skips) < args.classes:
            raise UsageError(f"only {len(skips)} default skips; pass --skips")
        ds = bench.gen_csl(bench.CSLSpec(args.n, skips, args.copies), args.seed)
        graphs, manifest = ds.graphs, ds.manifest()
    elif args.dataset == "tree":
        spec = bench.TreeMatchSpec(args.radius, args.examples, args.labels, args.variant)
        ds = bench.gen_tree_match(spec, args.seed)
        graphs, manifest = ds.graphs, ds.manifest()
    else:
        spec = bench.SBMSpec(args.blocks, args.nodes_per_block, args.p_in, args.p_out,
                             args.feature_dim, args.separation)
        g = bench.gen_sbm(spec, args.seed)
        graphs = g
        manifest = {"dataset": "sbm", "spec": spec.__dict__, "seed": args.seed,
                    "graph_hashes": [g.content_hash()], "dataset_hash": g.content_hash()}
    out.mkdir(parents=True, exist_ok=True)
    dump_graphs(graphs, out / "dataset.json")
    _write_json(out / "manifest.json", manifest)
    return {"dataset_hash": manifest["dataset_hash"], "path": str(out / "dataset.json")}


def cmd_presample(args) -> dict:
    graph_path = _need_file(args.graph, "graph")
    cfg = _load_config(args)
    k = args.k or cfg.k_infer
    data = make_task(cfg.task, load_graph(graph_path), cfg.seed)
    cache = data.presample(k, cfg.scales, cfg.bias, seed=cfg.seed, workers=cfg.workers)
    cache.meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "task": cfg.task.value}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache.save(out / "cache.bin")
    if args.export_json:
        cache.export_json(out / "cache.json")
    return {"cache": str(out / "cache.bin"), "digest": cache.digest(), "k": k,
            "instances": len(cache)}


def cmd_train(args) -> dict:
    graph_path = _need_file(args.graph, "graph")
    cache_path = _need_file(args.cache, "cache") if args.cache else None
    cfg = _load_config(args)
    data = make_task(cfg.task, load_graph(graph_path), cfg.seed)
    if cache_path is not None:
        cache = PatternCache.load(cache_path)
    else:
        cache = data.presample(cfg.k_infer, cfg.scales, cfg.bias, seed=cfg.seed,
                               workers=cfg.workers)
    out = Path(args.out)
    res = train(cfg, data, cache)
    test = evaluate(res.model, res.tables, data, cache, data.split.test, cfg.k_infer,
                    cfg.hits_k, cfg.eval_patterns, cfg.workers) if len(data.split.test) else None
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "seed": cfg.seed,
            "graph_hash": data.graph_hash(), "best_epoch": res.best_epoch}
    save_checkpoint(res.model, out / "checkpoint.bin", meta)
    write_history(res.history, out / "history.jsonl")
    report = {"metric": res.best_metric, "test_metric": test, "seed": cfg.seed,
              "config_hash": cfg.config_hash(), "best_epoch": res.best_epoch}
    _write_json(out / "report.json", report)
    return report


def _restore(args):
    ckpt_path = _need_file(args.checkpoint, "checkpoint")
    cache_path = _need_file(args.cache, "cache")
    graph_path = _need_file(args.graph, "graph")
    state, header = load_checkpoint(ckpt_path)
    meta = header["meta"]
    cfg = RunConfig.from_dict({**meta["config"], "workers": args.workers or 1}).validate()
    data = make_task(cfg.task, load_graph(graph_path), cfg.seed)
    cache = PatternCache.load(cache_path)
    if cache.graph_hash != meta["graph_hash"] or data.graph_hash() != meta["graph_hash"]:
        raise ConfigError("checkpoint, cache and graph were produced from different graphs")
    check_cache(cfg, data, cache)
    model, tables = build_model(cfg, data, np.dtype(header["dtype"]))
    model.load_state_dict(state)
    model.eval()
    return cfg, data, cache, model, tables, meta


def cmd_eval(args) -> dict:
    cfg, data, cache, model, tables, meta = _restore(args)
    k = args.k or cfg.k_infer
    rows = getattr(data.split, args.split)
    metric = evaluate(model, tables, data, cache, rows, k, cfg.hits_k, cfg.eval_patterns,
                      cfg.workers)
    report = {"metric": metric, "split": args.split, "k": k, "seed": cfg.seed,
              "config_hash": meta["config_hash"]}
    if args.out:
        _write_json(Path(args.out) / "eval.json", report)
    return report


def cmd_interpret(args) -> dict:
    from .identifier import export_interpretation, top_patterns
    from . import autograd as ag

    cfg, data, cache, model, tables, meta = _restore(args)
    if not cfg.use_class_token:
        raise ConfigError("interpretation needs a model trained with use_class_token")
    ids = tuple(int(x) for x in args.instance.split(","))
    inst = InstanceRef(cache.kind, ids)
    row = cache.row_of(inst)
    k = args.k or cfg.k_infer
    with ag.no_grad():
        nodes, arcs = cache.nodes[[row], :k], cache.arcs[[row], :k]
        _, record = model.forward_patterns(tables, nodes.astype(np.int64), arcs.astype(np.int64))
    pset = cache.pattern_set(inst)
    pset.patterns = pset.patterns[:k]
    ranked = top_patterns(record, pset, args.top_k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_interpretation(out / "interpret.json", {"kind": inst.kind.value, "ids": list(ids)},
                          ranked, out / "interpret.dot" if args.dot else None)
    return {"instance": list(ids), "top": ranked, "config_hash": meta["config_hash"]}


def cmd_gradcheck(args) -> dict:
    from .gradcheck import run_suite

    res = run_suite(args.seed or 0)
    if args.out:
        _write_json(Path(args.out) / "gradcheck.json", res)
    if not res["ok"]:
        raise TrainingError(f"gradient check failed: max rel error {res['max_rel_error']:.3e}")
    return {"max_rel_error": res["max_rel_error"],
            "max_rel_error_linear": res["max_rel_error_linear"]}


def cmd_bench(args) -> dict:
    res = bench.run_bench(args.seed or 0, args.workers or 1, quick=args.quick)
    if args.out:
        _write_json(Path(args.out) / "metrics.json", res)
    return res


def cmd_scaling(args) -> dict:
    res = bench.run_scaling(args.seed or 0, quick=args.quick)
    if args.out:
        _write_json(Path(args.out) / "scaling.json", res)
    return res


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    common.add_argument("--workers", type=int, default=None, help="sampling/eval threads")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="run-config JSON")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="gpm", description="Random-walk pattern learning on graphs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("dataset", choices=["csl", "tree", "sbm"])
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--copies", type=int, default=12)
    g.add_argument("--n", type=int, default=41)
    g.add_argument("--skips", type=int, nargs="+")
    g.add_argument("--radius", type=int, default=4)
    g.add_argument("--examples", type=int, default=200)
    g.add_argument("--labels", type=int, default=4)
    g.add_argument("--variant", choices=["key", "degree"], default="key")
    g.add_argument("--blocks", type=int, default=3)
    g.add_argument("--nodes-per-block", type=int, default=100)
    g.add_argument("--p-in", type=float, default=0.05)
    g.add_argument("--p-out", type=float, default=0.005)
    g.add_argument("--feature-dim", type=int, default=8)
    g.add_argument("--separation", type=float, default=1.0)

    tasks = ["node_clf", "link_pred", "graph_clf", "graph_reg"]
    s = sub.add_parser("presample", parents=[common], help="write a pattern cache")
    s.add_argument("--graph", required=True)
    s.add_argument("--task", choices=tasks)
    s.add_argument("--k", type=int, default=None, help="patterns per instance")
    s.add_argument("--export-json", action="store_true", help="also write cache.json")

    t = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    t.add_argument("--graph", required=True)
    t.add_argument("--task", choices=tasks)
    t.add_argument("--cache", default=None)

    for name, helptext in (("eval", "score a checkpoint"),
                           ("interpret", "rank patterns by class-token attention")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--cache", required=True)
        e.add_argument("--graph", required=True)
        e.add_argument("--k", type=int, default=None)
        if name == "eval":
            e.add_argument("--split", choices=["train", "val", "test"], default="test")
        else:
            e.add_argument("--instance", required=True, help="instance ids, e.g. 5 or 3,7")
            e.add_argument("--top-k", type=int, default=5)
            e.add_argument("--dot", action="store_true", help="also write a DOT file")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    b = sub.add_parser("bench", parents=[common], help="run the synthetic experiments")
    b.add_argument("--quick", action="store_true")
    c = sub.add_parser("scaling", parents=[common], help="time identifier and presample")
    c.add_argument("--quick", action="store_true")
    return p


COMMANDS = {"gen": cmd_gen, "presample": cmd_presample, "train": cmd_train, "eval": cmd_eval,
            "interpret": cmd_interpret, "gradcheck": cmd_gradcheck, "bench": cmd_bench,
            "scaling": cmd_scaling}

_OUT_REQUIRED = {"gen", "presample", "train", "interpret"}


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command in _OUT_REQUIRED and not args.out:
            raise UsageError(f"{args.command} needs --out")
        if args.workers is not None and args.workers < 1:
            raise UsageError("--workers must be positive")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "gen" and args.seed is None:
            args.seed = 0
        result = COMMANDS[args.command](args)
    except (UsageError, ConfigError, GraphFormatError, KeyError, ValueError,
            FileNotFoundError) as exc:
        print(f"gpm: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"gpm: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


def main():
    sys.exit(run())
