"""Synthetic experiments on :func:`optranse.synthetic.rotation_grid`."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .evaluator import rank_triples, score_candidates
from .paths import build_eval_table, build_path_stats, build_train_table
from .synthetic import rotation_grid
from .trainer import TrainConfig, Trainer

# settings found by sweeping on the grid; see demos/order_sensitivity.py
ORDER_CONFIG = dict(dim=20, lr=0.01, margin=4.0, step_margins=(4.0, 4.0), lam=0.01, epochs=300, batch_size=100, warm_start_epochs=0)
BENEFIT_CONFIG = dict(dim=10, lr=0.01, margin=4.0, step_margins=(4.0, 4.0), lam=0.01, epochs=300, batch_size=100, warm_start_epochs=0)
BENEFIT_HOLDOUT = 0.5


@dataclass
class Prepared:
    kg: object
    train_table: object
    eval_table: object


def prepare(seed=0, holdout=0.2, size=14, step=2) -> Prepared:
    kg = rotation_grid(size, step=step, holdout=holdout, seed=seed)
    g = kg.graph
    stats = build_path_stats(g, 2)
    return Prepared(kg, build_train_table(g, stats, 2), build_eval_table(g, stats, g.test, 2))


@dataclass
class RunResult:
    hits1: float
    hits10: float
    mean_rank: float
    distinguishing: float
    seconds: float


def run(prep: Prepared, **overrides) -> RunResult:
    """Train on the grid and score the held-out rule facts (filtered ranks, both sides).

    ``distinguishing`` is the fraction of held-out ``(h, r, t)`` whose true
    tail scores strictly better than the tail the other-order rule would
    give from the same head.
    """
    kg = prep.kg
    g = kg.graph
    cfg = TrainConfig(**overrides)
    start = time.perf_counter()
    trainer = Trainer(g, prep.train_table, cfg)
    trainer.fit()
    params, cache = trainer.params, trainer.cache
    ranks = np.array([res.filtered_rank for res in rank_triples(params, cache, g, prep.eval_table, g.test)])
    wins = total = 0
    for h, r, t in g.test.tolist():
        other = kg.counterpart[r].get(h)
        if other is None or other == t:
            continue
        s = score_candidates(params, cache, g, prep.eval_table, h=h, r=r)
        total += 1
        wins += bool(s[t] < s[other])
    return RunResult(
        100.0 * float((ranks <= 1).mean()),
        100.0 * float((ranks <= 10).mean()),
        float(ranks.mean()),
        100.0 * wins / max(total, 1),
        time.perf_counter() - start,
    )


def order_sensitivity(seed=0):
    """Full model versus the identity-projection ablation on the same grid."""
    prep = prepare(seed)
    full = run(prep, **{**ORDER_CONFIG, "seed": seed})
    ablation = run(prep, **{**ORDER_CONFIG, "seed": seed, "identity_projections": True})
    return full, ablation


def path_benefit(seeds=range(5)):
    """Filtered Hits@10 with and without the path term, one grid per seed.

    Returns ``(with_paths, without_paths)`` lists of Hits@10 in percent.
    """
    with_paths, without = [], []
    for s in seeds:
        prep = prepare(s, holdout=BENEFIT_HOLDOUT)
        with_paths.append(run(prep, **{**BENEFIT_CONFIG, "seed": s}).hits10)
        without.append(run(prep, **{**BENEFIT_CONFIG, "seed": s, "lam": 0.0}).hits10)
    return with_paths, without
