"""Small synthetic knowledge graphs with known compositional rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import KnowledgeGraph, from_id_triples

SHIFT, ROTATE, SHIFT_THEN_ROTATE, ROTATE_THEN_SHIFT = 0, 1, 2, 3


@dataclass
class CompositionalKG:
    graph: KnowledgeGraph
    held_out: np.ndarray
    # rule relation -> map from head entity to its target under the *other* rule
    counterpart: dict
    coords: np.ndarray


def rotation_grid(size: int = 14, step: int = 2, holdout: float = 0.2, seed: int = 0) -> CompositionalKG:
    """A ``size`` x ``size`` grid centred on the origin with two non-commuting maps.

    Coordinates are odd integers so that no point sits on the origin and the
    rotation has no fixed point. Relation 0 shifts a point ``step`` cells right,
    relation 1 rotates it a quarter turn about the origin.
    With ``step = 2`` the shift moves two cells, which keeps every pair
    reachable by the rotation off the shift's pairs. Relation 2 holds exactly when the path
    ``shift, rotate`` connects the pair and relation 3 when ``rotate, shift``
    does: the same relations in the opposite order. A ``holdout`` fraction of
    the rule facts goes to the test split; relation ids here are forward ids
    (``k``, stored as ``2k`` in the graph).
    """
    rng = np.random.default_rng(seed)
    side = np.arange(-(size - 1), size, 2)
    coords = np.array([(i, j) for i in side for j in side])
    index = {tuple(c): n for n, c in enumerate(coords.tolist())}

    def shift(p):
        return (p[0] + 2 * step, p[1])

    def rotate(p):
        return (-p[1], p[0])

    facts = {k: [] for k in range(4)}
    for p in index:
        for rel, fn in ((SHIFT, shift), (ROTATE, rotate), (SHIFT_THEN_ROTATE, lambda q: rotate(shift(q))), (ROTATE_THEN_SHIFT, lambda q: shift(rotate(q)))):
            q = fn(p)
            # rule facts need the whole path inside the grid
            if rel == SHIFT_THEN_ROTATE and shift(p) not in index:
                continue
            if rel == ROTATE_THEN_SHIFT and shift(rotate(p)) not in index:
                continue
            if q in index:
                facts[rel].append((index[p], rel, index[q]))

    train, test = list(facts[SHIFT]) + list(facts[ROTATE]), []
    for rel in (SHIFT_THEN_ROTATE, ROTATE_THEN_SHIFT):
        rows = facts[rel]
        perm = rng.permutation(len(rows))
        n_test = int(round(holdout * len(rows)))
        test += [rows[k] for k in perm[:n_test]]
        train += [rows[k] for k in perm[n_test:]]

    target = {rel: {h: t for h, _, t in facts[rel]} for rel in (SHIFT_THEN_ROTATE, ROTATE_THEN_SHIFT)}
    counterpart = {
        2 * SHIFT_THEN_ROTATE: target[ROTATE_THEN_SHIFT],
        2 * ROTATE_THEN_SHIFT: target[SHIFT_THEN_ROTATE],
    }
    graph = from_id_triples(len(coords), 4, train, test=test)
    return CompositionalKG(graph, graph.test.copy(), counterpart, coords)
