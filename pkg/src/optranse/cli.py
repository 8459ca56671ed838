"""Command-line entry points: ``prepare``, ``train``, ``eval`` and ``paths``.

Work directory layout::

    paths.opte          training and evaluation path tables
    stats.opte          path co-occurrence statistics
    model.optm(.json)   final checkpoint and sidecar
    model-eNNNNN.optm   periodic checkpoints (``checkpoint_every``)
    train_report.txt    one line per epoch
    train_summary.json
    eval_<split>.txt / eval_<split>.json
    manifest-<command>.json

Exit codes: 0 success, 1 usage error, 2 data or cache error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import formats as F
from . import model as M
from .config import ConfigError, RunConfig, build_run_config, dump_config, read_config_file, split_override
from .evaluator import evaluate
from .kg import ContractError, DataError, add_reverse_relations, load_dataset
from .paths import build_eval_table, build_path_stats, build_train_table, filtered_path_set
from .trainer import Trainer, TrainingError, full_objective

logger = logging.getLogger("optranse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PATHS_FILE = "paths.opte"
STATS_FILE = "stats.opte"
MODEL_FILE = "model.optm"
DATA_FILES = ("train.txt", "valid.txt", "test.txt")
# cache-shaping keys that train/eval must agree on with prepare
CACHE_KEYS = ("max_steps", "reliability_floor", "degree_cap")


class UsageError(Exception):
    pass


class CacheError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--data", help="dataset directory holding train.txt / valid.txt / test.txt")
    common.add_argument("--work", help="work directory for caches, checkpoints and reports")
    common.add_argument("--workers", type=int, help="worker processes for prepare and eval")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="optranse", description="Knowledge-graph completion with ordered relation paths.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="build the graph, path statistics and path caches")
    p.add_argument("--force", action="store_true", help="overwrite caches built for a different graph")

    sub.add_parser("train", parents=[common], help="warm start and train; writes checkpoints")

    e = sub.add_parser("eval", parents=[common], help="rank a split and write reports")
    e.add_argument("--split", help="split to evaluate (default: test)")
    e.add_argument("--raw-only", action="store_true", help="omit filtered columns")
    e.add_argument("--checkpoint", help="checkpoint to evaluate (default: work/model.optm)")

    q = sub.add_parser("paths", parents=[common], help="list the retained paths and energies for one triple")
    q.add_argument("head")
    q.add_argument("relation")
    q.add_argument("tail")
    q.add_argument("--checkpoint", help="checkpoint used for energies (default: work/model.optm if present)")
    q.add_argument("--training-mode", action="store_true", help="drop the single-edge path made of the queried triple")
    return parser


def resolve_config(args) -> RunConfig:
    pairs = read_config_file(args.config) if args.config else []
    if args.data is not None:
        pairs.append(("data_dir", args.data))
    if args.work is not None:
        pairs.append(("work_dir", args.work))
    if args.workers is not None:
        pairs.append(("workers", str(args.workers)))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    if getattr(args, "split", None):
        pairs.append(("split", args.split))
    if getattr(args, "raw_only", False):
        pairs.append(("raw_only", "true"))
    pairs += [split_override(s) for s in args.overrides]
    return build_run_config(pairs)


def load_graph(run: RunConfig):
    graph = load_dataset(run.data, run.column_order, DATA_FILES)
    return add_reverse_relations(graph)


def input_fingerprints(paths) -> dict:
    return {str(p): F.file_sha256(p) for p in paths if Path(p).is_file()}


def write_manifest(run: RunConfig, command: str, argv, inputs, outputs, graph=None, extra=None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": run.to_dict(),
        "config_text": dump_config(run),
        "seed": run.train.seed,
        "inputs": input_fingerprints(inputs),
        "outputs": sorted(str(o) for o in outputs),
        "graph_fingerprint": graph.fingerprint().hex() if graph is not None else None,
        "versions": {"optranse": __version__, "numpy": np.__version__, "python": platform.python_version()},
        **(extra or {}),
    }
    F.atomic_write(run.work / f"manifest-{command}.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _data_inputs(run):
    return [run.data / n for n in DATA_FILES]


def _cache_meta(run):
    t = run.train
    return {"max_steps": t.max_steps, "reliability_floor": t.reliability_floor, "degree_cap": t.degree_cap}


def _check_cache_meta(meta, run, path):
    want = _cache_meta(run)
    for key in CACHE_KEYS:
        if meta.get(key) != want[key]:
            raise CacheError(f"{path}: built with {key}={meta.get(key)!r} but config has {want[key]!r}; rerun prepare")


def load_caches(run: RunConfig, graph):
    fp = graph.fingerprint()
    paths_file, stats_file = run.work / PATHS_FILE, run.work / STATS_FILE
    for f in (paths_file, stats_file):
        if not f.is_file():
            raise CacheError(f"{f} missing; run 'optranse prepare' first")
    try:
        tables, meta = F.read_path_cache(paths_file, fp)
        stats = F.read_stats(stats_file, fp)
    except F.FingerprintMismatch as exc:
        raise CacheError(f"{exc}; rerun prepare") from None
    _check_cache_meta(meta, run, paths_file)
    return tables, stats


def cmd_prepare(run: RunConfig, args, argv, out=sys.stdout) -> int:
    graph = load_graph(run)
    fp = graph.fingerprint()
    work = run.work
    paths_file, stats_file = work / PATHS_FILE, work / STATS_FILE
    for f in (paths_file, stats_file):
        if f.is_file():
            try:
                stale = F.cache_fingerprint(f) != fp
            except F.FormatError:
                stale = True
            if stale and not args.force:
                raise CacheError(f"{f} was built for a different graph; pass --force to overwrite")
    t = run.train
    stats = build_path_stats(graph, t.max_steps, t.degree_cap, workers=run.workers)
    tables = {"train": build_train_table(graph, stats, t.max_steps, t.reliability_floor, t.degree_cap, workers=run.workers)}
    for split in run.eval_splits:
        if split not in graph.splits:
            raise ConfigError(f"unknown split {split!r}")
        if len(graph.splits[split]):
            tables[f"eval.{split}"] = build_eval_table(graph, stats, graph.splits[split], t.max_steps, t.reliability_floor, t.degree_cap, workers=run.workers)
    meta = _cache_meta(run)
    work.mkdir(parents=True, exist_ok=True)
    F.write_stats(stats_file, fp, stats, meta)
    F.write_path_cache(paths_file, fp, tables, meta)
    lines = [str(graph.report), f"graph fingerprint: {fp.hex()}"]
    for name, table in sorted(tables.items()):
        lines.append(f"{name}: {table.n_queries} queries, {len(table.candidate)} path instances")
    report = "\n".join(lines) + "\n"
    F.atomic_write(work / "prepare_report.txt", report.encode())
    out.write(report)
    write_manifest(run, "prepare", argv, _data_inputs(run), [paths_file, stats_file], graph)
    return EXIT_OK


def _sidecar(run, graph, extra=None):
    return {
        "config": run.train.to_dict(),
        "graph_fingerprint": graph.fingerprint().hex(),
        "entity_vocab_sha256": F.vocab_hash(graph.entities.labels),
        "relation_vocab_sha256": F.vocab_hash(graph.relations.labels),
        **(extra or {}),
    }


def cmd_train(run: RunConfig, args, argv, out=sys.stdout) -> int:
    graph = load_graph(run)
    tables, _ = load_caches(run, graph)
    cfg = run.train
    trainer = Trainer(graph, tables["train"], cfg)
    work = run.work
    written = []

    def checkpoint(name, extra=None):
        path = work / name
        F.save_checkpoint(path, trainer.params, _sidecar(run, graph, extra))
        written.append(path)

    trainer.warm_start()

    def periodic(tr, stats):
        if run.checkpoint_every and (len(tr.report.epochs) - cfg.warm_start_epochs) % run.checkpoint_every == 0:
            checkpoint(f"model-e{stats.epoch:05d}.optm", {"epoch": stats.epoch})

    for _ in range(cfg.epochs):
        stats = trainer.epoch()
        periodic(trainer, stats)
    final = full_objective(trainer.params, graph, tables["train"], cfg, seed=cfg.seed)
    summary_extra = {"final_objective": {"triple": final.triple, "path": final.path, "penalty": final.penalty, "total": final.total}, "objective_seed": cfg.seed}
    checkpoint(MODEL_FILE, summary_extra)
    lines = list(trainer.report.lines())
    lines.append(f"final objective (seed {cfg.seed}): {final.total:.12g}")
    F.atomic_write(work / "train_report.txt", ("\n".join(lines) + "\n").encode())
    summary = {**trainer.report.summary(), **summary_extra}
    F.atomic_write(work / "train_summary.json", (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())
    if run.verbosity > 0:
        out.write(lines[-1] + "\n")
    write_manifest(run, "train", argv, _data_inputs(run) + [work / PATHS_FILE, work / STATS_FILE], written, graph)
    return EXIT_OK


def load_model(path, run: RunConfig, graph) -> M.ModelParams:
    path = Path(path)
    if not path.is_file():
        raise CacheError(f"checkpoint {path} not found; run 'optranse train' first")
    params = F.load_checkpoint(path)
    if params.dim != run.train.dim:
        raise CacheError(f"checkpoint dimension {params.dim} does not match config dim={run.train.dim}")
    if params.n_entities != graph.n_entities or params.n_relations != graph.n_relations:
        raise CacheError(f"checkpoint shape ({params.n_entities} entities, {params.n_relations} relations) does not match the graph")
    try:
        side = F.read_sidecar(path)
    except FileNotFoundError:
        side = {}
    if side.get("graph_fingerprint") not in (None, graph.fingerprint().hex()):
        raise CacheError(f"checkpoint {path} was trained on a different graph")
    return params


def cmd_eval(run: RunConfig, args, argv, out=sys.stdout) -> int:
    graph = load_graph(run)
    tables, _ = load_caches(run, graph)
    ckpt = Path(args.checkpoint) if args.checkpoint else run.work / MODEL_FILE
    params = load_model(ckpt, run, graph)
    key = f"eval.{run.split}"
    if key not in tables:
        raise CacheError(f"no evaluation paths for split {run.split!r} in the cache; add it to eval_splits and rerun prepare")
    cache = M.refresh_transition_cache(params)
    report = evaluate(params, cache, graph, tables[key], split=run.split, k=run.k, config=run.train.to_dict(), raw_only=run.raw_only)
    text = report.to_text()
    base = run.work / f"eval_{run.split}"
    F.atomic_write(base.with_suffix(".txt"), text.encode())
    F.atomic_write(base.with_suffix(".json"), (report.to_json() + "\n").encode())
    out.write(text)
    write_manifest(run, "eval", argv, _data_inputs(run) + [run.work / PATHS_FILE, ckpt], [base.with_suffix(".txt"), base.with_suffix(".json")], graph)
    return EXIT_OK


def _fmt_path(graph, path):
    return "[" + ", ".join(graph.relations.resolve(r) for r in path) + "]"


def cmd_paths(run: RunConfig, args, argv, out=sys.stdout) -> int:
    graph = load_graph(run)
    stats_file = run.work / STATS_FILE
    if not stats_file.is_file():
        raise CacheError(f"{stats_file} missing; run 'optranse prepare' first")
    try:
        stats = F.read_stats(stats_file, graph.fingerprint())
    except F.FingerprintMismatch as exc:
        raise CacheError(f"{exc}; rerun prepare") from None
    h, r, t = graph.triple(args.head, args.relation, args.tail)
    cfg = run.train
    ps = filtered_path_set(graph, stats, h, r, t, cfg.max_steps, args.training_mode, cfg.reliability_floor, cfg.degree_cap)
    ckpt = Path(args.checkpoint) if args.checkpoint else run.work / MODEL_FILE
    params = cache = None
    if args.checkpoint or ckpt.is_file():
        params = load_model(ckpt, run, graph)
        cache = M.refresh_transition_cache(params)

    w = out.write
    w(f"query: {args.head} {args.relation} {args.tail}  (ids {h} {r} {t})\n")
    breakdown = M.final_energy(params, cache, h, r, t, ps, cfg.max_steps) if params is not None else None
    if breakdown is not None:
        w(f"direct energy: {breakdown.direct:.6f}\n")
    if len(ps) == 0:
        w("no paths retained for this pair\n")
    for step in range(1, cfg.max_steps + 1):
        insts = ps[step]
        if not insts:
            continue
        head = f"step {step}: {len(insts)} path(s)"
        if breakdown is not None and step in breakdown.per_step:
            head += f", pooled energy {breakdown.per_step[step][0]:.6f}"
        w(head + "\n")
        for inst in insts:
            line = f"  {_fmt_path(graph, inst.path):<40} Pr(p|h,t)={inst.reliability:.6f}  Pr(r|p)={inst.confidence:.6f}"
            if params is not None:
                line += f"  energy={M.path_energy(params, cache, h, inst.path, t):.6f}"
            w(line + "\n")
    if breakdown is None:
        w("no checkpoint found; energies omitted\n")
    else:
        if breakdown.winner == "direct":
            win = "direct"
        else:
            win = f"step {breakdown.winner} path {_fmt_path(graph, breakdown.winning_path)}"
        w(f"final energy: {breakdown.final:.6f} (winner: {win})\n")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "paths": cmd_paths}


def main(argv=None, out=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = out or sys.stdout
    err = sys.stderr
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
        run = resolve_config(args)
        return COMMANDS[args.command](run, args, argv, out)
    except (UsageError, ConfigError) as exc:
        err.write(f"optranse: usage error: {exc}\n")
        return EXIT_USAGE
    except (DataError, CacheError, F.FormatError, ContractError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        err.write(f"optranse: error: {msg}\n")
        return EXIT_DATA
    except (TrainingError, M.NumericalError, FloatingPointError) as exc:
        err.write(f"optranse: numerical failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
