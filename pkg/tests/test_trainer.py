import numpy as np
import pytest

import gradcheck as G
import oracles as O
from conftest import random_params
from optranse import model as M
from optranse.formats import checkpoint_bytes
from optranse.kg import from_id_triples
from optranse.paths import PathInstance, PathSet, build_path_stats, build_train_table
from optranse.trainer import (
    FB15K_CONFIG,
    WN18_CONFIG,
    BatchSample,
    PathBatch,
    TrainConfig,
    Trainer,
    TrainingError,
    batch_objective,
    full_objective,
    margin_loss_path,
    margin_loss_triple,
    normalized_weights,
    project_norms,
    sample_objective,
    train,
    warm_start,
)


def toy_graph(seed=0, n_entities=20, n_triples=50, n_relations=3):
    rng = np.random.default_rng(seed)
    rows = set()
    while len(rows) < n_triples:
        rows.add((int(rng.integers(n_entities)), int(rng.integers(n_relations)), int(rng.integers(n_entities))))
    return from_id_triples(n_entities, n_relations, sorted(rows))


def toy_setup(seed=0):
    g = toy_graph(seed)
    stats = build_path_stats(g, 2)
    return g, build_train_table(g, stats, 2)


def small_config(**kw):
    base = dict(dim=8, lr=0.01, margin=2.0, step_margins=(2.0, 2.0), lam=0.1, epochs=20, batch_size=16, warm_start_epochs=0)
    return TrainConfig(**{**base, **kw})


def line_params():
    """1-d identity model where energies are plain distances."""
    p = M.init_params(4, 2, 1, np.random.default_rng(0), identity=True)
    p.entity[:, 0] = [0.0, 1.0, 3.0, 10.0]
    p.relation[:] = 0.0
    return p


def test_triple_hinge_examples():
    p = line_params()
    cache = M.refresh_transition_cache(p)
    assert margin_loss_triple(p, cache, (0, 0, 1), (0, 0, 2), 5.0) == 3.0
    assert margin_loss_triple(p, cache, (0, 0, 1), (0, 0, 3), 5.0) == 0.0


def test_path_hinge_identical_pairs(rng):
    p = random_params(rng, 5, 3, 4)
    cache = M.refresh_transition_cache(p)
    assert margin_loss_path(p, cache, (0, 1), (0, 1), (0, 2), 5.5) == 5.5


def test_path_hinge_hand_evaluated(rng):
    p = random_params(rng, 5, 3, 4)
    cache = M.refresh_transition_cache(p)
    path = (1, 2)
    e_pos = O.path_energy_explicit(p.W1, p.W2, p.relation, p.entity[0], path, p.entity[1])
    e_neg = O.path_energy_explicit(p.W1, p.W2, p.relation, p.entity[2], path, p.entity[3])
    want = max(0.0, 5.0 + e_pos - e_neg)
    assert margin_loss_path(p, cache, (0, 1), (2, 3), path, 5.0) == pytest.approx(want, abs=1e-10)


def test_sample_objective_empty_paths(rng):
    p = random_params(rng, 5, 3, 4)
    cache = M.refresh_transition_cache(p)
    cfg = TrainConfig(dim=4, lam=0.5, margin=2.0)
    total, _, parts = sample_objective(p, cache, BatchSample((0, 1, 2), (3, 1, 2), PathSet()), cfg)
    assert parts.path == 0.0
    assert parts.triple == margin_loss_triple(p, cache, (0, 1, 2), (3, 1, 2), 2.0)
    assert total == parts.triple + parts.penalty


def test_sample_objective_lambda_zero_ignores_paths(rng):
    p = random_params(rng, 5, 3, 4)
    cache = M.refresh_transition_cache(p)
    ps = PathSet({2: [PathInstance((0, 1), 1.0, 1.0)]})
    sample = BatchSample((0, 1, 2), (3, 1, 2), ps)
    total0, _, parts0 = sample_objective(p, cache, sample, TrainConfig(dim=4, lam=0.0))
    assert parts0.path == 0.0


def test_sample_objective_weighted_sum(rng):
    p = random_params(rng, 6, 3, 4)
    cache = M.refresh_transition_cache(p)
    insts = {1: [PathInstance((2,), 0.5, 0.4)], 2: [PathInstance((0, 1), 1.0, 0.5), PathInstance((1, 0), 0.2, 1.0)]}
    sample = BatchSample((0, 1, 2), (3, 1, 4), PathSet(insts))
    cfg = TrainConfig(dim=4, lam=0.3, margin=2.0, step_margins=(2.5, 3.0))
    _, _, parts = sample_objective(p, cache, sample, cfg)
    want = 0.0
    for step, lst in insts.items():
        z = sum(i.reliability * i.confidence for i in lst)
        for i in lst:
            want += i.reliability * i.confidence / z * margin_loss_path(p, cache, (0, 2), (3, 4), i.path, cfg.step_margin(step))
    assert parts.path == pytest.approx(cfg.lam * want, rel=1e-12)


@pytest.mark.parametrize("norm", ["L1", "L2"])
def test_gradients_match_finite_differences(norm):
    res = G.check(np.random.default_rng(7), n_coords=200, norm=norm)
    assert len(res) >= 200
    terms = {t for t, _, _ in res}
    assert {"path-1step", "path-2step"} <= terms
    assert any("penalty" in t for t in terms)
    assert max(e for _, _, e in res) < 1e-4


def test_learned_transition_gradients(rng):
    p = random_params(rng, 6, 3, 3)
    p.m_mode = "learned"
    cache = M.refresh_transition_cache(p)
    M.ensure_transitions(p, cache, [(0, 1), (1, 2)])
    sample = BatchSample((0, 1, 2), (3, 1, 4), PathSet({2: [PathInstance((0, 1), 1.0, 1.0)], 3: [PathInstance((0, 1, 2), 0.5, 1.0)]}))
    cfg = TrainConfig(dim=3, lam=1.0, margin=1.0, step_margins=(9.0, 9.0, 9.0), max_steps=3)
    _, grads, parts = sample_objective(p, cache, sample, cfg)
    assert parts.path > 0
    for key, g in grads.transitions.items():
        for idx in np.ndindex(3, 3):
            old = p.transitions[key][idx]
            vals = []
            for sgn in (1, -1):
                p.transitions[key][idx] = old + sgn * 1e-6
                paths = PathBatch.from_path_sets([sample.path_set], 3)
                vals.append(batch_objective(p, cache, [sample.positive], [sample.negative], paths, cfg, with_grad=False)[0].path)
            p.transitions[key][idx] = old
            fd = (vals[0] - vals[1]) / 2e-6
            assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-6)


def test_path_terms_only_touch_relations(rng):
    p = random_params(rng, 6, 3, 4)
    cache = M.refresh_transition_cache(p)
    paths = PathBatch.from_path_sets([PathSet({2: [PathInstance((0, 1), 1.0, 1.0)]})], 2)
    pos, neg = [(0, 1, 2)], [(3, 1, 4)]
    cfg0 = TrainConfig(dim=4, lam=0.0, margin=3.0, step_margins=(9.0, 9.0))
    cfg1 = TrainConfig(dim=4, lam=1.0, margin=3.0, step_margins=(9.0, 9.0))
    _, g0 = batch_objective(p, cache, pos, neg, paths, cfg0)
    parts, g1 = batch_objective(p, cache, pos, neg, paths, cfg1)
    assert parts.path > 0
    d0, d1 = g0.dense(p), g1.dense(p)
    for name in ("entity", "W1", "W2"):
        assert np.array_equal(d0[name], d1[name])
    changed = np.flatnonzero(np.abs(d1["relation"] - d0["relation"]).sum(axis=1))
    assert set(changed.tolist()) <= {0, 1}


def test_inactive_hinge_gives_no_gradient():
    p = line_params()
    p.entity[:, 0] = [0.0, 0.1, 0.2, 0.9]
    cache = M.refresh_transition_cache(p)
    parts, grads = batch_objective(p, cache, [(0, 0, 1)], [(0, 0, 3)], PathBatch.empty(2), TrainConfig(dim=1, margin=0.5, lam=0.0))
    assert parts.triple == 0.0 and parts.penalty == 0.0
    assert grads.entity == [] and grads.relation == [] and grads.W1 == [] and grads.W2 == []


def test_project_norms():
    p = line_params()
    p.entity = np.array([[2.0, 0.0], [0.3, 0.4], [0.0, 0.0], [5.0, 5.0]])
    p.relation = np.array([[0.1, 0.1], [0.2, 0.2]])
    assert project_norms(p) == 2
    np.testing.assert_allclose(np.linalg.norm(p.entity, axis=1), [1.0, 0.5, 0.0, 1.0], atol=1e-15)
    assert project_norms(p) == 0


def test_project_random_overfull(rng):
    p = random_params(rng, 50, 3, 6)
    p.entity *= 10
    project_norms(p, np.arange(50))
    norms = np.linalg.norm(p.entity, axis=1)
    assert norms.max() <= 1 + 1e-12 and norms.max() == pytest.approx(1.0, abs=1e-15)


def test_zero_learning_rate_is_bitwise_noop():
    g, table = toy_setup()
    tr = Trainer(g, table, small_config(lr=0.0))
    before = tr.params.copy()
    for _ in range(3):
        tr.epoch()
    for name in ("entity", "relation", "W1", "W2"):
        assert np.array_equal(getattr(before, name), getattr(tr.params, name))


def test_loss_decreases_on_toy_graph():
    g, table = toy_setup()
    tr = Trainer(g, table, small_config())
    losses = []
    for _ in range(20):
        s = tr.epoch()
        losses.append(s.triple_loss + s.path_loss + s.penalty)
    assert losses[-1] < losses[0]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_norms_bounded_after_epochs():
    g, table = toy_setup()
    tr = Trainer(g, table, small_config(lr=0.5))
    for _ in range(5):
        tr.epoch()
        assert np.linalg.norm(tr.params.entity, axis=1).max() <= 1 + 1e-12
        assert np.linalg.norm(tr.params.relation, axis=1).max() <= 1 + 1e-12


def test_determinism():
    g, table = toy_setup()
    a, _, ra = train(g, table, small_config(epochs=5, warm_start_epochs=2))
    b, _, rb = train(g, table, small_config(epochs=5, warm_start_epochs=2))
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert [e.triple_loss for e in ra.epochs] == [e.triple_loss for e in rb.epochs]


def test_warm_start_zero_is_init():
    g, _ = toy_setup()
    cfg = small_config(warm_start_epochs=0)
    p = warm_start(g, cfg)
    q = M.init_params(g.n_entities, g.n_relations, cfg.dim, np.random.default_rng(cfg.seed))
    assert checkpoint_bytes(p) == checkpoint_bytes(q)


def test_lambda_zero_run_equals_warm_start():
    g, table = toy_setup()
    full, _, _ = train(g, table, small_config(lam=0.0, epochs=6, warm_start_epochs=0))
    warm = warm_start(g, small_config(warm_start_epochs=6))
    assert checkpoint_bytes(full) == checkpoint_bytes(warm)


def test_warm_start_lowers_final_loss():
    wins = []
    for seed in range(5):
        g, table = toy_setup(seed)
        cold = Trainer(g, table, small_config(seed=seed, epochs=10))
        cold.fit()
        warm = Trainer(g, table, small_config(seed=seed, epochs=10, warm_start_epochs=10))
        warm.fit()
        f_cold = full_objective(cold.params, g, table, cold.config, seed=99).total
        f_warm = full_objective(warm.params, g, table, warm.config, seed=99).total
        wins.append(f_cold - f_warm)
    assert np.median(wins) > 0


def test_non_finite_parameters_abort():
    g, table = toy_setup()
    tr = Trainer(g, table, small_config())
    tr.params.entity[0, 0] = np.nan
    with pytest.raises(TrainingError, match="batch"):
        tr.epoch()


def test_parallel_mode_runs():
    g, table = toy_setup()
    tr = Trainer(g, table, small_config(parallel_workers=2))
    s = tr.epoch()
    assert np.isfinite(s.triple_loss)
    assert np.linalg.norm(tr.params.entity, axis=1).max() <= 1 + 1e-12


def test_batch_cache_refresh_mode():
    g, table = toy_setup()
    tr = Trainer(g, table, small_config(cache_refresh="batch"))
    tr.epoch()
    assert tr.cache.epoch_stamp == tr.params.epoch


def test_learned_mode_trains():
    g, table = toy_setup()
    tr = Trainer(g, table, small_config(m_mode="learned"))
    tr.epoch()
    tr.epoch()
    assert tr.params.transitions
    assert all(np.isfinite(m).all() for m in tr.params.transitions.values())


def test_full_objective_pure():
    g, table = toy_setup()
    p, _, _ = train(g, table, small_config(epochs=2))
    snap = checkpoint_bytes(p)
    a = full_objective(p, g, table, small_config(), seed=3)
    b = full_objective(p, g, table, small_config(), seed=3)
    assert a == b and checkpoint_bytes(p) == snap


def test_normalized_weights_sum_to_one_per_step():
    g, table = toy_setup()
    w = normalized_weights(table)
    for q in range(table.n_queries):
        sl = table.slice(q)
        for n in set(table.length[sl].tolist()):
            assert w[sl][table.length[sl] == n].sum() == pytest.approx(1.0)


def test_config_validation_and_presets():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(margin=0)
    with pytest.raises(ValueError):
        TrainConfig(lam=-0.1)
    assert TrainConfig().step_margin(2) == 5.5
    assert TrainConfig().step_margin(3) == 5.5
    assert WN18_CONFIG["lr"] == 0.0001 and WN18_CONFIG["step_margins"] == (5.0, 5.5)
    assert FB15K_CONFIG["dim"] == 100 and FB15K_CONFIG["lr"] == 0.0005
    assert FB15K_CONFIG["margin"] == 4.0 and FB15K_CONFIG["step_margins"] == (4.5, 5.0) and FB15K_CONFIG["lam"] == 0.01
    cfg = TrainConfig(**FB15K_CONFIG)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_report_lines():
    g, table = toy_setup()
    tr = Trainer(g, table, small_config(epochs=2, warm_start_epochs=1))
    tr.fit()
    lines = list(tr.report.lines())
    assert len(lines) == 3 and lines[0].startswith("[warm]") and lines[-1].startswith("[train]")
    assert tr.report.summary()["seed"] == 0
