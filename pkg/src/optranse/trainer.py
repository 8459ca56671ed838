"""Margin-ranking SGD for the triple and path objectives."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import model as M
from .kg import KnowledgeGraph, corrupt_batch
from .paths import PathSet, PathTable

logger = logging.getLogger(__name__)

NORM_TOL = 1e-12


@dataclass
class TrainConfig:
    """Hyperparameters. Defaults follow the WN18 setting."""

    dim: int = 50
    lr: float = 0.0001
    margin: float = 5.0
    step_margins: tuple = (5.0, 5.5)
    lam: float = 0.01
    epochs: int = 2000
    batch_size: int = 1200
    norm: str = "L1"
    seed: int = 0
    max_steps: int = 2
    warm_start_epochs: int = 500
    m_mode: str = "derived"
    identity_projections: bool = False
    constraint_weight: float = 1.0
    negatives: int = 1
    cache_refresh: str = "epoch"
    reliability_floor: float = 0.01
    degree_cap: int = 400
    # > 1 enables the lock-free threaded mode (non-deterministic)
    parallel_workers: int = 1

    def __post_init__(self):
        self.step_margins = tuple(float(x) for x in self.step_margins)
        if self.dim < 1 or self.batch_size < 1:
            raise ValueError("dim and batch_size must be >= 1")
        if not 1 <= self.max_steps <= 3:
            raise ValueError("max_steps must be 1, 2 or 3")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.margin <= 0 or any(g <= 0 for g in self.step_margins):
            raise ValueError("margins must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.epochs < 0 or self.warm_start_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.cache_refresh not in ("epoch", "batch"):
            raise ValueError("cache_refresh must be 'epoch' or 'batch'")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.parallel_workers < 1:
            raise ValueError("parallel_workers must be >= 1")

    def step_margin(self, step: int) -> float:
        return self.step_margins[min(step, len(self.step_margins)) - 1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_margins"] = list(self.step_margins)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


WN18_CONFIG = dict(dim=50, lr=0.0001, margin=5.0, step_margins=(5.0, 5.5), lam=0.01, epochs=2000, batch_size=1200)
FB15K_CONFIG = dict(dim=100, lr=0.0005, margin=4.0, step_margins=(4.5, 5.0), lam=0.01, epochs=2000, batch_size=4800)


@dataclass
class Gradients:
    """Sparse gradient rows, summed into parameters with ``np.add.at``."""

    entity: list = field(default_factory=list)
    relation: list = field(default_factory=list)
    W1: list = field(default_factory=list)
    W2: list = field(default_factory=list)
    transitions: dict = field(default_factory=dict)

    def dense(self, params: M.ModelParams) -> dict:
        out = {
            "entity": np.zeros_like(params.entity),
            "relation": np.zeros_like(params.relation),
            "W1": np.zeros_like(params.W1),
            "W2": np.zeros_like(params.W2),
        }
        for name in out:
            for idx, rows in getattr(self, name):
                np.add.at(out[name], idx, rows)
        return out

    def apply(self, params: M.ModelParams, lr: float, frozen_projections=False):
        for name in ("entity", "relation") + (() if frozen_projections else ("W1", "W2")):
            target = getattr(params, name)
            for idx, rows in getattr(self, name):
                np.add.at(target, idx, -lr * rows)
        for key, g in self.transitions.items():
            params.transitions[key] -= lr * g

    def touched(self, name) -> np.ndarray:
        parts = [idx for idx, _ in getattr(self, name)]
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)


@dataclass
class LossParts:
    triple: float = 0.0
    path: float = 0.0
    penalty: float = 0.0

    @property
    def total(self):
        return self.triple + self.path + self.penalty


@dataclass
class PathBatch:
    """Flattened path instances for a batch; ``owner`` indexes the batch rows."""

    owner: np.ndarray
    rels: np.ndarray
    length: np.ndarray
    weight: np.ndarray

    @classmethod
    def empty(cls, max_steps):
        return cls(np.zeros(0, np.int64), np.zeros((0, max_steps), np.int64), np.zeros(0, np.int64), np.zeros(0))

    @classmethod
    def from_path_sets(cls, path_sets, max_steps) -> "PathBatch":
        owner, rels, length, weight = [], [], [], []
        for b, ps in enumerate(path_sets):
            for step, insts in ps.by_step.items():
                z = ps.normalizer(step)
                if z <= 0:
                    continue
                for inst in insts:
                    owner.append(b)
                    row = list(inst.path) + [-1] * (max_steps - len(inst.path))
                    rels.append(row)
                    length.append(len(inst.path))
                    weight.append(inst.reliability * inst.confidence / z)
        if not owner:
            return cls.empty(max_steps)
        return cls(np.asarray(owner), np.asarray(rels, dtype=np.int64), np.asarray(length), np.asarray(weight, dtype=float))


def normalized_weights(table: PathTable) -> np.ndarray:
    """``Pr(p|h,t) Pr(r|p) / Z_i`` per instance, ``Z_i`` summing over the query's ``i``-step paths."""
    w = table.reliability * table.confidence
    owner = np.repeat(np.arange(table.n_queries), np.diff(table.offsets))
    key = owner * (table.max_steps + 1) + table.length
    z = np.bincount(key, weights=w, minlength=(table.n_queries) * (table.max_steps + 1))
    return np.divide(w, z[key], out=np.zeros_like(w), where=z[key] > 0)


def gather_path_batch(table: PathTable, weights: np.ndarray, query_ids: np.ndarray) -> PathBatch:
    starts = table.offsets[query_ids]
    counts = table.offsets[query_ids + 1] - starts
    total = int(counts.sum())
    if total == 0:
        return PathBatch.empty(table.max_steps)
    owner = np.repeat(np.arange(len(query_ids)), counts)
    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    rows = np.repeat(starts, counts) + within
    return PathBatch(owner, table.rels[rows], table.length[rows], weights[rows])


def _hinge(x):
    return np.maximum(x, 0.0)


def batch_objective(params: M.ModelParams, cache: M.TransitionCache, pos, neg, paths: PathBatch, config: TrainConfig, with_grad=True):
    """Loss of a batch of ``(positive, negative)`` triples and their path instances.

    Path terms only produce gradients for the relation vectors along each
    path (and learned transitions, when enabled). Returns ``(LossParts,
    Gradients | None)``.
    """
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(neg, dtype=np.int64).reshape(-1, 3)
    norm = params.norm
    E, R = params.entity, params.relation
    grads = Gradients() if with_grad else None
    parts = LossParts()
    identity = config.identity_projections

    r = pos[:, 1]
    W1, W2 = params.W1[r], params.W2[r]
    hp, tp, hn, tn = E[pos[:, 0]], E[pos[:, 2]], E[neg[:, 0]], E[neg[:, 2]]
    W1hp, W2tp, W1hn, W2tn = M._mv(W1, hp), M._mv(W2, tp), M._mv(W1, hn), M._mv(W2, tn)
    e_pos = W1hp + R[r] - W2tp
    e_neg = W1hn + R[r] - W2tn
    slack = config.margin + M.norm_of(e_pos, norm) - M.norm_of(e_neg, norm)
    active = slack > 0
    parts.triple = float(_hinge(slack).sum())

    if with_grad and active.any():
        a = active
        sp = M.norm_grad(e_pos[a], norm)
        sn = M.norm_grad(e_neg[a], norm)
        W1a, W2a = W1[a], W2[a]
        grads.entity += [
            (pos[a, 0], M._mtv(W1a, sp)),
            (pos[a, 2], -M._mtv(W2a, sp)),
            (neg[a, 0], -M._mtv(W1a, sn)),
            (neg[a, 2], M._mtv(W2a, sn)),
        ]
        grads.relation.append((r[a], sp - sn))
        if not identity:
            grads.W1.append((r[a], np.einsum("bi,bj->bij", sp, hp[a]) - np.einsum("bi,bj->bij", sn, hn[a])))
            grads.W2.append((r[a], -np.einsum("bi,bj->bij", sp, tp[a]) + np.einsum("bi,bj->bij", sn, tn[a])))

    if not identity and config.constraint_weight > 0:
        cw = config.constraint_weight
        for proj, x, ent, which in ((W1hp, hp, pos[:, 0], "W1"), (W2tp, tp, pos[:, 2], "W2"), (W1hn, hn, neg[:, 0], "W1"), (W2tn, tn, neg[:, 2], "W2")):
            over = (proj * proj).sum(axis=1) - 1.0
            on = over > 0
            parts.penalty += cw * float(over[on].sum())
            if with_grad and on.any():
                v = proj[on]
                Wm = (W1 if which == "W1" else W2)[on]
                grads.entity.append((ent[on], 2 * cw * M._mtv(Wm, v)))
                getattr(grads, which).append((r[on], 2 * cw * np.einsum("bi,bj->bij", v, x[on])))

    if config.lam > 0 and len(paths.owner):
        for n in np.unique(paths.length):
            sel = paths.length == n
            owner = paths.owner[sel]
            rels = paths.rels[sel][:, :n]
            w = config.lam * paths.weight[sel]
            e_p = M.path_residual_vectors(params, cache, hp[owner], rels, tp[owner])
            e_n = M.path_residual_vectors(params, cache, hn[owner], rels, tn[owner])
            pslack = config.step_margin(int(n)) + M.norm_of(e_p, norm) - M.norm_of(e_n, norm)
            on = pslack > 0
            parts.path += float((w * _hinge(pslack)).sum())
            if with_grad and on.any():
                sp = M.norm_grad(e_p[on], norm) * w[on, None]
                sn = M.norm_grad(e_n[on], norm) * w[on, None]
                ron = rels[on]
                gp = M.path_relation_grads(params, cache, ron, sp)
                gn = M.path_relation_grads(params, cache, ron, sn)
                for k in range(n):
                    grads.relation.append((ron[:, k], gp[k] - gn[k]))
                if params.m_mode == "learned" and n > 1:
                    _transition_grads(params, cache, hp[owner][on], hn[owner][on], tp[owner][on], tn[owner][on], ron, sp, sn, grads)
    return parts, grads


def _transition_grads(params, cache, hp, hn, tp, tn, rels, sp, sn, grads):
    # residual = W1 h + r1 + T2 a2, a_k = r_k + T_{k+1} a_{k+1}, a_n = r_n - W2[rn] t
    n = rels.shape[1]
    for tvec, s, sign in ((tp, sp, 1.0), (tn, sn, -1.0)):
        accs = {}
        acc = params.relation[rels[:, -1]] - M._mv(params.W2[rels[:, -1]], tvec)
        accs[n - 1] = acc
        for k in range(n - 1, 0, -1):
            acc = params.relation[rels[:, k - 1]] + M._apply_T(params, cache, rels[:, k - 1], rels[:, k], acc)
            accs[k - 1] = acc
        # gradient of s . residual wrt T_k (k = 1..n-1 zero-based next index) is (S^{k-1}.T s) a_k^T
        g = s
        for k in range(1, n):
            for b in range(len(rels)):
                key = (int(rels[b, k - 1]), int(rels[b, k]))
                upd = sign * np.outer(g[b], accs[k][b])
                grads.transitions[key] = grads.transitions.get(key, 0.0) + upd
            g = M._apply_T_transpose(params, cache, rels[:, k - 1], rels[:, k], g)


@dataclass
class BatchSample:
    positive: tuple
    negative: tuple
    path_set: PathSet

    def normalizer(self, step: int) -> float:
        return self.path_set.normalizer(step)


def margin_loss_triple(params, cache, pos, neg, margin: float) -> float:
    """``[margin + E(pos) - E(neg)]_+`` with triple energies."""
    return max(0.0, margin + M.triple_energy(params, *pos) - M.triple_energy(params, *neg))


def margin_loss_path(params, cache, pos_pair, neg_pair, path, margin: float) -> float:
    """Hinge between the same path's energy on the positive and the corrupted pair."""
    e_pos = M.path_energy(params, cache, pos_pair[0], path, pos_pair[1])
    e_neg = M.path_energy(params, cache, neg_pair[0], path, neg_pair[1])
    return max(0.0, margin + e_pos - e_neg)


def sample_objective(params, cache, sample: BatchSample, config: TrainConfig):
    """Loss and sparse gradients of one training sample."""
    paths = PathBatch.from_path_sets([sample.path_set], config.max_steps)
    parts, grads = batch_objective(params, cache, [sample.positive], [sample.negative], paths, config)
    return parts.total, grads, parts


def project_norms(params: M.ModelParams, entity_ids=None, relation_ids=None) -> int:
    """Rescale touched entity/relation vectors with L2 norm above 1 back onto the unit sphere."""
    violations = 0
    for table, ids in ((params.entity, entity_ids), (params.relation, relation_ids)):
        if ids is None:
            ids = np.arange(len(table))
        if len(ids) == 0:
            continue
        norms = np.linalg.norm(table[ids], axis=1)
        over = norms > 1.0 + NORM_TOL
        if over.any():
            sel = ids[over]
            table[sel] /= norms[over, None]
            violations += int(over.sum())
    return violations


@dataclass
class EpochStats:
    epoch: int
    triple_loss: float
    path_loss: float
    penalty: float
    violations: int
    seconds: float
    phase: str = "train"


@dataclass
class TrainReport:
    config: dict
    seed: int
    epochs: list = field(default_factory=list)

    def lines(self):
        for e in self.epochs:
            yield (
                f"[{e.phase}] epoch {e.epoch}: triple {e.triple_loss:.6f} path {e.path_loss:.6f} "
                f"penalty {e.penalty:.6f} violations {e.violations} ({e.seconds:.2f}s)"
            )

    def summary(self) -> dict:
        return {"config": self.config, "seed": self.seed, "epochs": [asdict(e) for e in self.epochs]}


class TrainingError(RuntimeError):
    pass


class Trainer:
    """Stateful SGD loop over a fixed graph and training path table.

    ``path_table`` must hold one ``PAIR`` query per row of ``graph.train``, in
    order (as produced by :func:`optranse.paths.build_train_table`). It may be
    ``None`` when ``config.lam == 0``.
    """

    def __init__(self, graph: KnowledgeGraph, path_table: PathTable | None, config: TrainConfig, params=None, rng=None):
        self.graph = graph
        self.table = path_table
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        if params is None:
            params = M.init_params(
                graph.n_entities,
                graph.n_relations,
                config.dim,
                self.rng,
                norm=config.norm,
                m_mode=config.m_mode,
                identity=config.identity_projections,
            )
        self.params = params
        if path_table is not None and path_table.n_queries != len(graph.train):
            raise ValueError("path table does not match the train split")
        self.weights = normalized_weights(path_table) if path_table is not None else None
        self.head_prob = graph.head_replace_prob()
        self.report = TrainReport(config.to_dict(), config.seed)
        self.cache = None

    def epoch(self, lam=None, phase="train") -> EpochStats:
        cfg = self.config
        lam = cfg.lam if lam is None else lam
        run_cfg = cfg if lam == cfg.lam else TrainConfig(**{**cfg.to_dict(), "lam": lam})
        p = self.params
        p.epoch += 1
        self.cache = M.refresh_transition_cache(p)
        start = time.perf_counter()
        train = self.graph.train
        order = self.rng.permutation(len(train))
        totals = LossParts()
        violations = 0
        use_paths = lam > 0 and self.table is not None
        if p.m_mode == "learned" and use_paths:
            multi = self.table.rels[self.table.length > 1]
            pairs = {(int(a), int(b)) for row in multi for a, b in zip(row[:-1], row[1:]) if a >= 0 and b >= 0}
            M.ensure_transitions(p, self.cache, sorted(pairs))
        batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        if cfg.parallel_workers > 1:
            totals, violations = self._parallel_batches(batches, run_cfg, use_paths)
        else:
            for bi, idx in enumerate(batches):
                parts, v = self._run_batch(bi, idx, run_cfg, use_paths, self.rng)
                totals.triple += parts.triple
                totals.path += parts.path
                totals.penalty += parts.penalty
                violations += v
                if cfg.cache_refresh == "batch":
                    self.cache = M.refresh_transition_cache(p)
        n = max(1, len(train) * cfg.negatives)
        stats = EpochStats(
            p.epoch,
            totals.triple / n,
            totals.path / n,
            totals.penalty / n,
            violations,
            time.perf_counter() - start,
            phase,
        )
        self.report.epochs.append(stats)
        logger.info(next(iter(TrainReport({}, 0, [stats]).lines())))
        return stats

    def _run_batch(self, bi, idx, cfg, use_paths, rng):
        p = self.params
        totals = LossParts()
        violations = 0
        for _ in range(cfg.negatives):
            pos = self.graph.train[idx]
            neg = corrupt_batch(self.graph, pos, rng, self.head_prob)
            if use_paths:
                paths = gather_path_batch(self.table, self.weights, idx)
            else:
                paths = PathBatch.empty(cfg.max_steps)
            parts, grads = batch_objective(p, self.cache, pos, neg, paths, cfg)
            totals.triple += parts.triple
            totals.path += parts.path
            totals.penalty += parts.penalty
            grads.apply(p, cfg.lr, frozen_projections=cfg.identity_projections)
            violations += project_norms(p, grads.touched("entity"), grads.touched("relation"))
            if not p.all_finite():
                raise TrainingError(f"non-finite parameters after epoch {p.epoch}, batch {bi}")
        return totals, violations

    def _parallel_batches(self, batches, cfg, use_paths):
        """Lock-free mode: threads apply sparse updates to the shared arrays unsynchronized.

        Results depend on thread scheduling, so this mode is not reproducible.
        The transition cache stays fixed for the whole epoch.
        """
        rngs = self.rng.spawn(cfg.parallel_workers)
        shards = [batches[w :: cfg.parallel_workers] for w in range(cfg.parallel_workers)]

        def work(w):
            out, v = LossParts(), 0
            for bi, idx in enumerate(shards[w]):
                parts, dv = self._run_batch(bi * cfg.parallel_workers + w, idx, cfg, use_paths, rngs[w])
                out.triple += parts.triple
                out.path += parts.path
                out.penalty += parts.penalty
                v += dv
            return out, v

        totals, violations = LossParts(), 0
        with ThreadPoolExecutor(cfg.parallel_workers) as pool:
            for parts, v in pool.map(work, range(cfg.parallel_workers)):
                totals.triple += parts.triple
                totals.path += parts.path
                totals.penalty += parts.penalty
                violations += v
        return totals, violations

    def warm_start(self):
        """Triple-only training for ``config.warm_start_epochs`` epochs."""
        for _ in range(self.config.warm_start_epochs):
            self.epoch(lam=0.0, phase="warm")
        return self.params

    def fit(self, epochs=None, callback=None):
        self.warm_start()
        for _ in range(self.config.epochs if epochs is None else epochs):
            stats = self.epoch()
            if callback is not None:
                callback(self, stats)
        self.cache = M.refresh_transition_cache(self.params)
        return self.params


def warm_start(graph, config: TrainConfig, rng=None) -> M.ModelParams:
    trainer = Trainer(graph, None, config, rng=rng)
    return trainer.warm_start()


def train(graph, path_table, config: TrainConfig):
    """Warm start followed by full training; returns ``(params, cache, report)``."""
    trainer = Trainer(graph, path_table, config)
    trainer.fit()
    return trainer.params, trainer.cache, trainer.report


def full_objective(params: M.ModelParams, graph: KnowledgeGraph, path_table: PathTable | None, config: TrainConfig, seed: int = 0) -> LossParts:
    """Mean objective over the whole train split with negatives drawn from ``seed``.

    Parameters are not modified, so the value is a pure function of the
    parameters, the data and ``seed``.
    """
    rng = np.random.default_rng(seed)
    cache = M.refresh_transition_cache(params)
    train = graph.train
    head_prob = graph.head_replace_prob()
    weights = normalized_weights(path_table) if path_table is not None and config.lam > 0 else None
    totals = LossParts()
    for start in range(0, len(train), config.batch_size):
        idx = np.arange(start, min(start + config.batch_size, len(train)))
        pos = train[idx]
        neg = corrupt_batch(graph, pos, rng, head_prob)
        paths = gather_path_batch(path_table, weights, idx) if weights is not None else PathBatch.empty(config.max_steps)
        parts, _ = batch_objective(params, cache, pos, neg, paths, config, with_grad=False)
        totals.triple += parts.triple
        totals.path += parts.path
        totals.penalty += parts.penalty
    n = max(1, len(train))
    return LossParts(totals.triple / n, totals.path / n, totals.penalty / n)
