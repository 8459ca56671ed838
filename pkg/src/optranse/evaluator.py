"""Link-prediction ranking under the pooled final energy."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .kg import CATEGORY_THRESHOLD, CategoryUnavailableError, KnowledgeGraph, RelationCategory, relation_category
from .paths import HEAD, TAIL, PathTable

TIE_RULE = "rank = 1 + #candidates with strictly smaller energy (ties favour the target)"
PATH_SOURCE = "evaluation paths enumerated over train edges only"


class Side(str, enum.Enum):
    HEAD = "head"
    TAIL = "tail"


class RankMode(str, enum.Enum):
    RAW = "raw"
    FILTERED = "filtered"


@dataclass
class RankResult:
    triple: tuple
    side: Side
    raw_rank: int
    filtered_rank: int


def pooled_path_energies(params, cache, table: PathTable | None, query: int | None, fixed: int, side: Side, n_entities: int) -> np.ndarray:
    """Per-candidate minimum path energy for one open-slot query (``inf`` where no path)."""
    pooled = np.full(n_entities, np.inf)
    if table is None or query is None:
        return pooled
    sl = table.slice(query)
    cand = table.candidate[sl]
    if len(cand) == 0:
        return pooled
    length = table.length[sl]
    rels = table.rels[sl]
    E = params.entity
    for n in np.unique(length):
        sel = length == n
        c = cand[sel]
        if side is Side.TAIL:
            h = np.broadcast_to(E[fixed], (len(c), params.dim))
            t = E[c]
        else:
            h = E[c]
            t = np.broadcast_to(E[fixed], (len(c), params.dim))
        e = M.norm_of(M.path_residual_vectors(params, cache, h, rels[sel][:, :n], t), params.norm)
        np.minimum.at(pooled, c, e)
    return pooled


def score_candidates(params, cache, graph: KnowledgeGraph, table: PathTable | None, h=None, r=None, t=None) -> np.ndarray:
    """Final energy of every candidate entity for a query with exactly one open slot.

    Candidates without cached paths score with the direct energy alone.
    """
    if (h is None) == (t is None):
        raise ValueError("exactly one of h, t must be open")
    E = params.entity
    if t is None:
        side, fixed = Side.TAIL, h
        direct = M.norm_of(M._mv(params.W1[r], E[h]) + params.relation[r] - E @ params.W2[r].T, params.norm)
        q = table.find(h, r, -1, TAIL) if table is not None else None
    else:
        side, fixed = Side.HEAD, t
        direct = M.norm_of(E @ params.W1[r].T + params.relation[r] - M._mv(params.W2[r], E[t]), params.norm)
        q = table.find(-1, r, t, HEAD) if table is not None else None
    pooled = pooled_path_energies(params, cache, table, q, fixed, side, graph.n_entities)
    return np.minimum(direct, pooled)


def rank_of(scores: np.ndarray, target: int, graph: KnowledgeGraph, query, mode: RankMode | str = RankMode.FILTERED) -> int:
    """Rank of ``target`` among all candidates.

    ``query`` is ``(h, r, t)`` with the open slot set to ``None``. Filtered
    mode drops other candidates that complete a known fact in any split.
    """
    mode = RankMode(mode)
    better = scores < scores[target]
    if mode is RankMode.FILTERED:
        h, r, t = query
        cand = np.arange(len(scores))
        if t is None:
            triples = np.stack([np.full_like(cand, h), np.full_like(cand, r), cand], axis=1)
        else:
            triples = np.stack([cand, np.full_like(cand, r), np.full_like(cand, t)], axis=1)
        known = graph.contains(triples)
        known[target] = False
        better &= ~known
    return 1 + int(better.sum())


CATEGORIES = list(RelationCategory)


@dataclass
class EvalReport:
    mean_rank: dict
    hits: dict
    mrr: dict
    k: int
    category_hits: dict
    category_counts: dict
    n_triples: int
    split: str = "test"
    config: dict = field(default_factory=dict)
    raw_only: bool = False

    def header(self):
        return [
            f"# split: {self.split}, triples: {self.n_triples}",
            f"# ties: {TIE_RULE}",
            f"# paths: {PATH_SOURCE}",
            f"# categories: mean tails-per-head / heads-per-tail threshold {CATEGORY_THRESHOLD} on train",
        ]

    def to_text(self) -> str:
        lines = self.header()
        cols = ["raw"] if self.raw_only else ["raw", "filtered"]
        lines.append("")
        lines.append(f"{'metric':<12}" + "".join(f"{c:>12}" for c in cols))
        lines.append(f"{'MeanRank':<12}" + "".join(f"{self.mean_rank[c]:>12.1f}" for c in cols))
        lines.append(f"{'Hits@' + str(self.k) + '(%)':<12}" + "".join(f"{self.hits[c]:>12.1f}" for c in cols))
        lines.append(f"{'MRR':<12}" + "".join(f"{self.mrr[c]:>12.4f}" for c in cols))
        if not self.raw_only:
            lines.append("")
            lines.append(f"filtered Hits@{self.k} (%) by relation category")
            lines.append(f"{'side':<6}" + "".join(f"{c.value:>10}" for c in CATEGORIES))
            for side in Side:
                row = []
                for c in CATEGORIES:
                    v = self.category_hits[side.value][c.value]
                    row.append(f"{'-':>10}" if v is None else f"{v:>10.1f}")
                lines.append(f"{side.value:<6}" + "".join(row))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        d = {
            "split": self.split,
            "n_triples": self.n_triples,
            "k": self.k,
            "mean_rank_raw": self.mean_rank["raw"],
            f"hits_at_{self.k}_raw": self.hits["raw"],
            "mrr_raw": self.mrr["raw"],
            "tie_rule": TIE_RULE,
            "path_source": PATH_SOURCE,
            "category_threshold": CATEGORY_THRESHOLD,
            "config": self.config,
        }
        if not self.raw_only:
            d.update(
                {
                    "mean_rank_filtered": self.mean_rank["filtered"],
                    f"hits_at_{self.k}_filtered": self.hits["filtered"],
                    "mrr_filtered": self.mrr["filtered"],
                    "category_hits_filtered": self.category_hits,
                    "category_counts": self.category_counts,
                }
            )
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def rank_triples(params, cache, graph: KnowledgeGraph, table: PathTable | None, triples) -> list[RankResult]:
    """Head-side and tail-side ranks for each triple, in input order."""
    results = []
    for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
        s = score_candidates(params, cache, graph, table, h=h, r=r)
        results.append(RankResult((h, r, t), Side.TAIL, rank_of(s, t, graph, (h, r, None), "raw"), rank_of(s, t, graph, (h, r, None), "filtered")))
        s = score_candidates(params, cache, graph, table, r=r, t=t)
        results.append(RankResult((h, r, t), Side.HEAD, rank_of(s, h, graph, (None, r, t), "raw"), rank_of(s, h, graph, (None, r, t), "filtered")))
    return results


def summarize(graph: KnowledgeGraph, results: list[RankResult], k=10, split="test", config=None, raw_only=False) -> EvalReport:
    raw = np.array([x.raw_rank for x in results], dtype=float)
    filt = np.array([x.filtered_rank for x in results], dtype=float)
    mean_rank = {"raw": float(raw.mean()), "filtered": float(filt.mean())}
    # percentages as 100 * count / n, rounded once
    n = len(results)
    hits = {"raw": 100.0 * int((raw <= k).sum()) / n, "filtered": 100.0 * int((filt <= k).sum()) / n}
    mrr = {"raw": float((1.0 / raw).mean()), "filtered": float((1.0 / filt).mean())}
    cat_hits = {s.value: {c.value: [] for c in CATEGORIES} for s in Side}
    categories = {}
    for res in results:
        r = res.triple[1]
        if r not in categories:
            try:
                categories[r] = relation_category(graph, r)
            except CategoryUnavailableError:
                categories[r] = None
        cat = categories[r]
        if cat is not None:
            cat_hits[res.side.value][cat.value].append(res.filtered_rank <= k)
    counts = {s: {c: len(v) for c, v in row.items()} for s, row in cat_hits.items()}
    table = {s: {c: (100.0 * sum(v) / len(v) if v else None) for c, v in row.items()} for s, row in cat_hits.items()}
    return EvalReport(mean_rank, hits, mrr, k, table, counts, len(results) // 2, split, config or {}, raw_only)


def evaluate(params, cache, graph: KnowledgeGraph, table: PathTable | None, split="test", k=10, config=None, raw_only=False, triples=None) -> EvalReport:
    """Rank every triple of ``split`` on both sides and aggregate MR, Hits@k and the category table."""
    if triples is None:
        triples = graph.splits[split]
    if len(triples) == 0:
        raise ValueError(f"split {split!r} is empty")
    results = rank_triples(params, cache, graph, table, triples)
    return summarize(graph, results, k, split, config, raw_only)
