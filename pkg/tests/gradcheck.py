"""Central finite-difference check of the training objective's gradients."""

import numpy as np

from conftest import random_params
from optranse import model as M
from optranse.paths import PathInstance, PathSet
from optranse.trainer import BatchSample, PathBatch, TrainConfig, batch_objective, sample_objective

EPS = 1e-6
KINK = 1e-3


def random_sample(rng, n_entities, n_relations, max_paths=3):
    h, t, h2, t2 = rng.integers(n_entities, size=4)
    r = int(rng.integers(n_relations))
    by = {}
    # one step count per sample so each path term is checked on its own
    n = int(rng.integers(1, 3))
    for _ in range(rng.integers(1, max_paths + 1)):
        path = tuple(int(x) for x in rng.integers(n_relations, size=n))
        by.setdefault(n, []).append(PathInstance(path, float(rng.uniform(0.05, 1)), float(rng.uniform(0.05, 1))))
    return BatchSample((int(h), r, int(t)), (int(h2), r, int(t2)), PathSet(by))


def kink_distance(p, cache, sample, cfg):
    """Distance of the sample to the nearest hinge, L1 or penalty kink."""
    pos, neg = sample.positive, sample.negative
    d = []
    ep = M.triple_residual(p, *pos)
    en = M.triple_residual(p, *neg)
    d.append(abs(cfg.margin + M.norm_of(ep, p.norm) - M.norm_of(en, p.norm)))
    d += list(np.abs(ep)) + list(np.abs(en))
    r = pos[1]
    for W, e in ((p.W1[r], p.entity[pos[0]]), (p.W2[r], p.entity[pos[2]]), (p.W1[r], p.entity[neg[0]]), (p.W2[r], p.entity[neg[2]])):
        d.append(abs(float(np.sum((W @ e) ** 2)) - 1.0))
    if cfg.lam > 0:
        for inst in sample.path_set.instances():
            rels = np.asarray([inst.path])
            a = M.path_residual_vectors(p, cache, p.entity[[pos[0]]], rels, p.entity[[pos[2]]])[0]
            b = M.path_residual_vectors(p, cache, p.entity[[neg[0]]], rels, p.entity[[neg[2]]])[0]
            d.append(abs(cfg.step_margin(len(inst.path)) + M.norm_of(a, p.norm) - M.norm_of(b, p.norm)))
            d += list(np.abs(a)) + list(np.abs(b))
    return min(d)


def _loss(p, cache, sample, cfg, part):
    paths = PathBatch.from_path_sets([sample.path_set], cfg.max_steps)
    parts, _ = batch_objective(p, cache, [sample.positive], [sample.negative], paths, cfg, with_grad=False)
    return getattr(parts, part) if part != "total" else parts.total


def check(rng, n_coords=500, dim=4, norm="L1", max_tries=5000):
    """Return a list of ``(term, param, rel_error)`` over at least ``n_coords`` coordinates.

    The triple term plus penalty is checked on every parameter class with
    ``lambda = 0``. Path terms are checked on relation vectors only, since
    that is the only class they update.
    """
    results = []
    n_e, n_r = 6, 4
    tries = 0
    while len(results) < n_coords and tries < max_tries:
        tries += 1
        p = random_params(rng, n_e, n_r, dim, norm=norm, spread=0.3)
        # larger entity vectors keep the soft constraint active in some samples
        p.entity *= rng.uniform(0.8, 1.6)
        cache = M.refresh_transition_cache(p)
        sample = random_sample(rng, n_e, n_r)
        base = TrainConfig(dim=dim, margin=float(rng.uniform(0.5, 3)), step_margins=(float(rng.uniform(0.5, 3)), float(rng.uniform(0.5, 3))), lam=0.0)
        with_paths = TrainConfig(**{**base.to_dict(), "lam": float(rng.uniform(0.1, 2))})
        if kink_distance(p, cache, sample, with_paths) < KINK:
            continue
        _, g0, parts0 = sample_objective(p, cache, sample, base)
        _, g1, parts1 = sample_objective(p, cache, sample, with_paths)
        if parts0.triple + parts0.penalty == 0 and parts1.path == 0:
            continue
        d0 = g0.dense(p)
        d1 = g1.dense(p)
        jobs = []
        if parts0.triple + parts0.penalty > 0:
            term = "+".join(k for k, v in (("triple", parts0.triple), ("penalty", parts0.penalty)) if v > 0)
            for name in ("entity", "relation", "W1", "W2"):
                jobs.append((term, name, base, d0[name], "total"))
        if parts1.path > 0:
            steps = max(sample.path_set.by_step)
            jobs.append((f"path-{steps}step", "relation", with_paths, d1["relation"] - d0["relation"], "path"))
        for term, name, cfg, analytic, part in jobs:
            arr = getattr(p, name)
            nz = np.argwhere(np.abs(analytic) > 1e-7)
            if len(nz) == 0:
                continue
            for idx in nz[rng.permutation(len(nz))[:4]]:
                idx = tuple(idx)
                old = arr[idx]
                arr[idx] = old + EPS
                up = _loss(p, cache, sample, cfg, part)
                arr[idx] = old - EPS
                down = _loss(p, cache, sample, cfg, part)
                arr[idx] = old
                fd = (up - down) / (2 * EPS)
                a = analytic[idx]
                results.append((term, name, abs(a - fd) / max(abs(a), abs(fd), 1e-8)))
    return results
