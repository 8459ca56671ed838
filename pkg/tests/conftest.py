import os
from pathlib import Path

import numpy as np
import pytest

from optranse import model as M
from optranse.kg import KnowledgeGraph, build_graph, from_id_triples


def labelled(triples, valid=(), test=()) -> KnowledgeGraph:
    """Augmented graph from ``(h, r, t)`` label triples."""
    from optranse.kg import add_reverse_relations

    return add_reverse_relations(build_graph(triples, valid, test))


def random_graph(rng, n_entities=12, n_edges=40, n_relations=3, augment=True) -> KnowledgeGraph:
    rows = {
        (int(rng.integers(n_entities)), int(rng.integers(n_relations)), int(rng.integers(n_entities)))
        for _ in range(n_edges)
    }
    return from_id_triples(n_entities, n_relations, sorted(rows), augment=augment)


def random_params(rng, n_entities, n_relations, dim, norm="L1", spread=0.3, identity=False) -> M.ModelParams:
    """Generic parameters: projections well away from identity unless ``identity``."""
    p = M.init_params(n_entities, n_relations, dim, rng, norm=norm, identity=identity)
    if not identity:
        p.W1 = p.W1 + spread * rng.standard_normal(p.W1.shape)
        p.W2 = p.W2 + spread * rng.standard_normal(p.W2.shape)
    return p


def chain_instance(rng, d, n):
    """Parameters and entities satisfying every equation of the chain system exactly.

    Entity ``k + 1`` is obtained from entity ``k`` by forward substitution
    ``W2[r] x_{k+1} = W1[r] x_k + r``, with every projection invertible.
    """
    p = random_params(rng, n + 1, n, d, spread=0.5)
    for W in (p.W1, p.W2):
        for k in range(n):
            while abs(np.linalg.det(W[k])) < 0.1:
                W[k] = np.eye(d) + 0.5 * rng.standard_normal((d, d))
    path = tuple(range(n))
    node = p.entity[0]
    for k, r in enumerate(path):
        node = np.linalg.solve(p.W2[r], p.W1[r] @ node + p.relation[r])
        p.entity[k + 1] = node
    return p, path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_dir(tmp_path) -> Path:
    """Small on-disk dataset with two compositional rules and held-out facts."""
    d = tmp_path / "toy"
    d.mkdir()
    rules = [("a", "r1", "b"), ("b", "r2", "c"), ("a", "r3", "c"), ("d", "r1", "e"), ("e", "r2", "f"), ("d", "r3", "f")]
    extra = [("g", "r1", "h"), ("h", "r2", "i"), ("c", "r1", "g"), ("f", "r2", "a"), ("i", "r1", "d")]
    (d / "train.txt").write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in rules + extra))
    (d / "valid.txt").write_text("h\tr1\ti\n")
    (d / "test.txt").write_text("g\tr3\ti\nb\tr1\tc\n")
    return d


def benchmark_dir(name):
    """Directory of a benchmark dataset, from ``OPTRANSE_<NAME>`` or ``data/<name>``."""
    env = os.environ.get(f"OPTRANSE_{name.upper()}")
    candidates = [Path(env)] if env else []
    root = Path(__file__).resolve().parent.parent
    candidates += [root / "data" / name, root / "data" / name.lower(), root / "data" / name.upper()]
    for c in candidates:
        if (c / "train.txt").is_file():
            return c
    return None


# one summary line per acceptance criterion, collected from test_acceptance.py
_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::test_criterion_", 1)[1]
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = detail or report.longrepr[2]
        _CRITERIA[name] = (status, detail)
    elif report.when == "teardown" and name in _CRITERIA and detail:
        _CRITERIA[name] = (_CRITERIA[name][0], detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_", 1)[0])):
        status, detail = _CRITERIA[name]
        num, label = name.split("_", 1)
        terminalreporter.write_line(f"criterion {num:>2} {status}  {label.replace('_', ' ')}: {detail}")
