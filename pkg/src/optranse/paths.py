"""Bounded-length relation paths, resource-allocation reliability and path confidence.

A relation path is a plain tuple of relation ids; ``(r1, r2)`` and
``(r2, r1)`` are different keys. Reliability of a path from ``h`` to ``t``
follows resource allocation: a unit of resource starts at ``h`` and at every
step each node splits what it holds equally among its successors through the
next relation. The amount reaching ``t`` is ``Pr(p | h, t)``.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .kg import KnowledgeGraph

logger = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 2
MAX_STEPS_CAP = 3
DEFAULT_RELIABILITY_FLOOR = 0.01
DEFAULT_DEGREE_CAP = 400

RelationPath = tuple


class PathInstance(NamedTuple):
    path: tuple
    reliability: float
    confidence: float


@dataclass
class PathSet:
    """Filtered paths for one ``(h, r, t)`` query, grouped by step count."""

    by_step: dict = field(default_factory=dict)

    def __getitem__(self, step):
        return self.by_step.get(step, [])

    def instances(self):
        for step in sorted(self.by_step):
            yield from self.by_step[step]

    def __len__(self):
        return sum(len(v) for v in self.by_step.values())

    def normalizer(self, step: int) -> float:
        """Sum of ``reliability * confidence`` over the paths with ``step`` relations."""
        return float(sum(p.reliability * p.confidence for p in self[step]))


def _check_steps(max_steps):
    if not 1 <= max_steps <= MAX_STEPS_CAP:
        raise ValueError(f"max_steps must be in [1, {MAX_STEPS_CAP}], got {max_steps}")


def _expandable(graph, node, degree_cap):
    return degree_cap is None or graph.out_degree(node) <= degree_cap


def enumerate_paths(graph: KnowledgeGraph, h: int, t: int, max_steps: int = DEFAULT_MAX_STEPS, degree_cap=None):
    """All walks from ``h`` to ``t`` over train edges with at most ``max_steps`` relations.

    Returns a list of ``(relations, nodes)`` where ``nodes`` includes both
    endpoints. Intermediate nodes whose out-degree exceeds ``degree_cap`` are
    not expanded.
    """
    _check_steps(max_steps)
    found = []

    def walk(node, rels, nodes):
        if rels and node == t:
            found.append((tuple(rels), tuple(nodes)))
        if len(rels) == max_steps:
            return
        if rels and not _expandable(graph, node, degree_cap):
            return
        for r, succ in graph.out_index.get(node, {}).items():
            for m in succ:
                rels.append(r)
                nodes.append(m)
                walk(m, rels, nodes)
                rels.pop()
                nodes.pop()

    walk(h, [], [h])
    return found


def pcra_reliability(graph: KnowledgeGraph, h: int, path, t: int, degree_cap=None) -> float:
    """Resource reaching ``t`` when a unit starts at ``h`` and flows along ``path``.

    Returns 0.0 when the path does not connect the pair.
    """
    resource = {h: 1.0}
    for i, r in enumerate(path):
        nxt: dict = defaultdict(float)
        for node, amount in resource.items():
            if i > 0 and not _expandable(graph, node, degree_cap):
                continue
            succ = graph.successors(node, r)
            if not succ:
                continue
            share = amount / len(succ)
            for m in succ:
                nxt[m] += share
        resource = nxt
        if not resource:
            return 0.0
    return float(resource.get(t, 0.0))


def forward_flows(graph: KnowledgeGraph, source: int, max_steps: int = DEFAULT_MAX_STEPS, degree_cap=None) -> dict:
    """Reliability of every path leaving ``source``, keyed ``{endpoint: {path: reliability}}``."""
    _check_steps(max_steps)
    result: dict = defaultdict(dict)
    level = {}
    for r, succ in graph.out_index.get(source, {}).items():
        share = 1.0 / len(succ)
        level[(r,)] = {m: share for m in succ}
    for step in range(1, max_steps + 1):
        for path, dist in level.items():
            for node, amount in dist.items():
                result[node][path] = amount
        if step == max_steps:
            break
        nxt: dict = {}
        for path, dist in level.items():
            for node, amount in dist.items():
                if not _expandable(graph, node, degree_cap):
                    continue
                for r, succ in graph.out_index.get(node, {}).items():
                    share = amount / len(succ)
                    bucket = nxt.setdefault(path + (r,), {})
                    for m in succ:
                        bucket[m] = bucket.get(m, 0.0) + share
        level = nxt
    return dict(result)


def backward_flows(graph: KnowledgeGraph, target: int, max_steps: int = DEFAULT_MAX_STEPS, degree_cap=None) -> dict:
    """Reliability of every path entering ``target``, keyed ``{start: {path: reliability}}``.

    Resource allocation is linear, so the amount a start node delivers to
    ``target`` obeys ``V(x) = sum_{y in succ(x, r)} V(y) / |succ(x, r)|``
    evaluated backwards from ``V(target) = 1``; this gives the same numbers
    as running :func:`pcra_reliability` from every start node.
    """
    _check_steps(max_steps)
    result: dict = defaultdict(dict)
    # level maps a path suffix to {node: value}, node being where the suffix starts
    level = {}
    for r, preds in graph.in_index.get(target, {}).items():
        level[(r,)] = {x: 1.0 / len(graph.successors(x, r)) for x in preds}
    for step in range(1, max_steps + 1):
        for path, vals in level.items():
            for node, v in vals.items():
                result[node][path] = v
        if step == max_steps:
            break
        nxt: dict = {}
        for suffix, vals in level.items():
            for node, v in vals.items():
                # node becomes an intermediate node of the extended path
                if not _expandable(graph, node, degree_cap):
                    continue
                for r, preds in graph.in_index.get(node, {}).items():
                    bucket = nxt.setdefault((r,) + suffix, {})
                    for x in preds:
                        bucket[x] = bucket.get(x, 0.0) + v / len(graph.successors(x, r))
        level = nxt
    return dict(result)


@dataclass
class PathStats:
    """Corpus counts behind ``Pr(r | p) = N(r, p) / N(p)``.

    ``pair_count[p]`` is the number of ordered entity pairs connected by at
    least one walk of type ``p``; ``co_count[(r, p)]`` is how many of those
    pairs are also linked directly by ``r``.
    """

    pair_count: Counter = field(default_factory=Counter)
    co_count: Counter = field(default_factory=Counter)
    max_steps: int = DEFAULT_MAX_STEPS

    def confidence(self, relation: int, path) -> float:
        n = self.pair_count.get(tuple(path), 0)
        if n == 0:
            return 0.0
        return self.co_count.get((relation, tuple(path)), 0) / n

    def merge(self, other: "PathStats"):
        self.pair_count.update(other.pair_count)
        self.co_count.update(other.co_count)


def _stats_chunk(args):
    graph, sources, max_steps, degree_cap = args
    stats = PathStats(max_steps=max_steps)
    for x in sources:
        for y, paths in forward_flows(graph, x, max_steps, degree_cap).items():
            rels = graph.relations_between(x, y)
            for p in paths:
                stats.pair_count[p] += 1
                for r in rels:
                    stats.co_count[(r, p)] += 1
    return stats


def _chunks(items, n):
    size = max(1, -(-len(items) // n))
    return [items[i : i + size] for i in range(0, len(items), size)]


def build_path_stats(graph: KnowledgeGraph, max_steps: int = DEFAULT_MAX_STEPS, degree_cap=DEFAULT_DEGREE_CAP, workers: int = 1) -> PathStats:
    """Count path types and their co-occurrence with direct relations over train."""
    _check_steps(max_steps)
    sources = sorted(graph.out_index)
    if workers <= 1:
        return _stats_chunk((graph, sources, max_steps, degree_cap))
    stats = PathStats(max_steps=max_steps)
    jobs = [(graph, c, max_steps, degree_cap) for c in _chunks(sources, workers * 4)]
    with ProcessPoolExecutor(workers) as pool:
        for part in pool.map(_stats_chunk, jobs):
            stats.merge(part)
    return stats


def _filter(paths: dict, relation: int, stats: PathStats, floor: float, exclude=None) -> PathSet:
    by_step: dict = {}
    for p in sorted(paths, key=lambda q: (len(q), q)):
        if p == exclude:
            continue
        rel = paths[p]
        if rel < floor:
            continue
        conf = stats.confidence(relation, p)
        if conf <= 0.0:
            continue
        by_step.setdefault(len(p), []).append(PathInstance(p, float(rel), float(conf)))
    return PathSet(by_step)


def filtered_path_set(
    graph: KnowledgeGraph,
    stats: PathStats,
    h: int,
    r: int,
    t: int,
    max_steps: int = DEFAULT_MAX_STEPS,
    training_mode: bool = False,
    reliability_floor: float = DEFAULT_RELIABILITY_FLOOR,
    degree_cap=DEFAULT_DEGREE_CAP,
) -> PathSet:
    """Paths from ``h`` to ``t`` with ``Pr(r|p) > 0`` and reliability at least the floor.

    Within a step count, paths are listed in ascending relation-id order. In
    training mode the single-edge path ``(r,)`` (the queried triple itself) is
    dropped.
    """
    paths = forward_flows(graph, h, max_steps, degree_cap).get(t, {})
    return _filter(paths, r, stats, reliability_floor, exclude=(r,) if training_mode else None)


# ---------------------------------------------------------------------------
# columnar cache used by the trainer and evaluator

PAIR, TAIL, HEAD = 0, 1, 2


@dataclass
class PathTable:
    """Path sets for many queries in flat arrays.

    ``queries`` holds rows ``(h, r, t, mode)``. For ``PAIR`` queries every
    instance belongs to the fixed pair. For ``TAIL`` queries (tail open, ``t``
    is -1) and ``HEAD`` queries (head open, ``h`` is -1) each instance carries
    the ``candidate`` entity that fills the open slot. Instances of query ``q``
    live in ``offsets[q]:offsets[q + 1]``, ordered by candidate, step count,
    then relation ids.
    """

    queries: np.ndarray
    offsets: np.ndarray
    candidate: np.ndarray
    rels: np.ndarray
    length: np.ndarray
    reliability: np.ndarray
    confidence: np.ndarray
    max_steps: int = DEFAULT_MAX_STEPS

    def __post_init__(self):
        self._lookup = {tuple(q): i for i, q in enumerate(self.queries.tolist())}

    @property
    def n_queries(self):
        return len(self.queries)

    def find(self, h, r, t, mode) -> int | None:
        return self._lookup.get((int(h), int(r), int(t), int(mode)))

    def slice(self, q: int) -> slice:
        return slice(int(self.offsets[q]), int(self.offsets[q + 1]))

    def path_set(self, q: int, candidate=None) -> PathSet:
        sl = self.slice(q)
        by_step: dict = {}
        for c, rels, n, rel, conf in zip(
            self.candidate[sl], self.rels[sl], self.length[sl], self.reliability[sl], self.confidence[sl]
        ):
            if candidate is not None and c != candidate:
                continue
            by_step.setdefault(int(n), []).append(PathInstance(tuple(int(x) for x in rels[:n]), float(rel), float(conf)))
        return PathSet(by_step)

    def equals(self, other: "PathTable") -> bool:
        return self.max_steps == other.max_steps and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("queries", "offsets", "candidate", "rels", "length", "reliability", "confidence")
        )


class _TableBuilder:
    def __init__(self, max_steps):
        self.max_steps = max_steps
        self.queries = []
        self.offsets = [0]
        self.rows = []

    def add(self, query, groups):
        """``groups`` is a list of ``(candidate, PathSet)``."""
        self.queries.append(query)
        for cand, ps in groups:
            for inst in ps.instances():
                self.rows.append((cand, inst))
        self.offsets.append(len(self.rows))

    def build(self) -> PathTable:
        n = len(self.rows)
        rels = np.full((n, self.max_steps), -1, dtype=np.int64)
        length = np.zeros(n, dtype=np.int64)
        cand = np.zeros(n, dtype=np.int64)
        rel = np.zeros(n)
        conf = np.zeros(n)
        for i, (c, inst) in enumerate(self.rows):
            rels[i, : len(inst.path)] = inst.path
            length[i] = len(inst.path)
            cand[i] = c
            rel[i] = inst.reliability
            conf[i] = inst.confidence
        return PathTable(
            queries=np.asarray(self.queries, dtype=np.int64).reshape(-1, 4),
            offsets=np.asarray(self.offsets, dtype=np.int64),
            candidate=cand,
            rels=rels,
            length=length,
            reliability=rel,
            confidence=conf,
            max_steps=self.max_steps,
        )


def _train_chunk(args):
    graph, stats, sources, max_steps, floor, degree_cap = args
    by_source = defaultdict(list)
    for i, (h, r, t) in enumerate(graph.train.tolist()):
        by_source[h].append((i, r, t))
    out = []
    for h in sources:
        flows = forward_flows(graph, h, max_steps, degree_cap)
        for i, r, t in by_source[h]:
            out.append((i, _filter(flows.get(t, {}), r, stats, floor, exclude=(r,))))
    return out


def build_train_table(
    graph: KnowledgeGraph,
    stats: PathStats,
    max_steps: int = DEFAULT_MAX_STEPS,
    reliability_floor: float = DEFAULT_RELIABILITY_FLOOR,
    degree_cap=DEFAULT_DEGREE_CAP,
    workers: int = 1,
) -> PathTable:
    """Training-mode path set for every train triple; query ``i`` is ``graph.train[i]``."""
    sources = sorted(set(graph.train[:, 0].tolist()))
    jobs = [(graph, stats, c, max_steps, reliability_floor, degree_cap) for c in _chunks(sources, max(1, workers) * 4)]
    results = {}
    if workers <= 1:
        for job in jobs:
            results.update(_train_chunk(job))
    else:
        with ProcessPoolExecutor(workers) as pool:
            for part in pool.map(_train_chunk, jobs):
                results.update(part)
    builder = _TableBuilder(max_steps)
    for i, (h, r, t) in enumerate(graph.train.tolist()):
        builder.add((h, r, t, PAIR), [(t, results[i])])
    return builder.build()


def query_groups(graph, stats, anchor, r, mode, max_steps, floor, degree_cap):
    """Per-candidate path sets for an open-slot query."""
    if mode == TAIL:
        flows = forward_flows(graph, anchor, max_steps, degree_cap)
    else:
        flows = backward_flows(graph, anchor, max_steps, degree_cap)
    groups = []
    for cand in sorted(flows):
        ps = _filter(flows[cand], r, stats, floor)
        if len(ps):
            groups.append((cand, ps))
    return groups


def _eval_chunk(args):
    graph, stats, queries, max_steps, floor, degree_cap = args
    out = []
    for h, r, t, mode in queries:
        anchor = h if mode == TAIL else t
        out.append(((h, r, t, mode), query_groups(graph, stats, anchor, r, mode, max_steps, floor, degree_cap)))
    return out


def eval_queries(triples) -> list:
    """Distinct open-slot queries ``(h, r, -1, TAIL)`` and ``(-1, r, t, HEAD)`` for ``triples``."""
    qs = set()
    for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
        qs.add((h, r, -1, TAIL))
        qs.add((-1, r, t, HEAD))
    return sorted(qs)


def build_eval_table(
    graph: KnowledgeGraph,
    stats: PathStats,
    triples,
    max_steps: int = DEFAULT_MAX_STEPS,
    reliability_floor: float = DEFAULT_RELIABILITY_FLOOR,
    degree_cap=DEFAULT_DEGREE_CAP,
    workers: int = 1,
) -> PathTable:
    """Evaluation-mode path sets for both open-slot queries of every triple.

    Paths use train edges only.
    """
    queries = eval_queries(triples)
    jobs = [(graph, stats, c, max_steps, reliability_floor, degree_cap) for c in _chunks(queries, max(1, workers) * 4)]
    results = {}
    if workers <= 1:
        for job in jobs:
            results.update(_eval_chunk(job))
    else:
        with ProcessPoolExecutor(workers) as pool:
            for part in pool.map(_eval_chunk, jobs):
                results.update(part)
    builder = _TableBuilder(max_steps)
    for q in queries:
        builder.add(q, results[q])
    return builder.build()
