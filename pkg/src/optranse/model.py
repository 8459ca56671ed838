"""Parameters and energies of the order-preserving path model.

Every relation ``r`` owns a vector ``r`` and two projections: ``W1[r]`` maps
the head entity into the relation's head space and ``W2[r]`` maps the tail.
The energy of a path ``r1 .. rn`` from ``h`` to ``t`` is

    || W1[r1] h + sum_i S^i r_i - S^n W2[rn] t ||

with ``S^i = T_1 ... T_i``, ``T_1 = I`` and ``T_k = M(r_k, r_{k-1})`` the
transition from the head space of ``r_k`` into the tail space of
``r_{k-1}``. ``M`` is derived as ``W2[r_{k-1}] pinv(W1[r_k])`` unless learned
transitions are requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kg import ContractError
from .paths import PathSet

PINV_RCOND = 1e-8


class NumericalError(ArithmeticError):
    pass


@dataclass
class ModelParams:
    entity: np.ndarray
    relation: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    norm: str = "L1"
    m_mode: str = "derived"
    # learned transitions keyed by (previous relation, next relation)
    transitions: dict = field(default_factory=dict)
    epoch: int = 0

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    @property
    def n_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.entity.copy(),
            self.relation.copy(),
            self.W1.copy(),
            self.W2.copy(),
            self.norm,
            self.m_mode,
            {k: v.copy() for k, v in self.transitions.items()},
            self.epoch,
        )

    def all_finite(self) -> bool:
        arrays = [self.entity, self.relation, self.W1, self.W2, *self.transitions.values()]
        return all(np.isfinite(a).all() for a in arrays)


def _ball(x):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1.0)


def init_params(n_entities: int, n_relations: int, dim: int, rng: np.random.Generator, norm="L1", m_mode="derived", identity=False):
    """Uniform vectors in ``[-6/sqrt(d), 6/sqrt(d)]`` projected onto the unit ball.

    Projections start at the identity plus ``U(-0.005, 0.005)`` noise, or at
    exactly the identity when ``identity`` is set.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if norm not in ("L1", "L2"):
        raise ValueError(f"unknown norm {norm!r}")
    if m_mode not in ("derived", "learned"):
        raise ValueError(f"unknown m_mode {m_mode!r}")
    bound = 6.0 / math.sqrt(dim)
    entity = _ball(rng.uniform(-bound, bound, size=(n_entities, dim)))
    relation = _ball(rng.uniform(-bound, bound, size=(n_relations, dim)))
    eye = np.broadcast_to(np.eye(dim), (n_relations, dim, dim))
    if identity:
        W1, W2 = eye.copy(), eye.copy()
    else:
        W1 = eye + rng.uniform(-0.005, 0.005, size=eye.shape)
        W2 = eye + rng.uniform(-0.005, 0.005, size=eye.shape)
    return ModelParams(entity, relation, W1, W2, norm=norm, m_mode=m_mode)


@dataclass
class TransitionCache:
    pinv_W1: np.ndarray
    epoch_stamp: int


def refresh_transition_cache(params: ModelParams) -> TransitionCache:
    """Pseudo-inverse of every ``W1[r]``, stamped with the current epoch.

    Singular values below ``1e-8 * sigma_max`` are treated as zero.
    """
    try:
        pinv = np.linalg.pinv(params.W1, rcond=PINV_RCOND)
    except np.linalg.LinAlgError:
        for r, W in enumerate(params.W1):
            try:
                np.linalg.pinv(W, rcond=PINV_RCOND)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"SVD did not converge for W1 of relation {r}") from exc
        raise
    return TransitionCache(pinv, params.epoch)


def _check_cache(params, cache):
    if cache is None or cache.epoch_stamp != params.epoch:
        raise ContractError(
            f"transition cache is stale (cache epoch {getattr(cache, 'epoch_stamp', None)}, params epoch {params.epoch})"
        )


def transition(params: ModelParams, cache: TransitionCache, prev: int, nxt: int) -> np.ndarray:
    """``M(nxt, prev)``: maps the head space of ``nxt`` into the tail space of ``prev``."""
    if params.m_mode == "learned":
        M = params.transitions.get((prev, nxt))
        if M is not None:
            return M
    return params.W2[prev] @ cache.pinv_W1[nxt]


def ensure_transitions(params: ModelParams, cache: TransitionCache, pairs):
    """Create learned transitions for unseen ``(prev, next)`` pairs from their derived value."""
    for prev, nxt in pairs:
        key = (int(prev), int(nxt))
        if key not in params.transitions:
            params.transitions[key] = params.W2[key[0]] @ cache.pinv_W1[key[1]]


def sequence_matrices(params: ModelParams, cache: TransitionCache, path):
    """Return ``([S^1, ..., S^n], W_p)`` for ``path`` with the product taken left to right."""
    _check_cache(params, cache)
    path = tuple(path)
    d = params.dim
    S = [np.eye(d)]
    for k in range(1, len(path)):
        S.append(S[-1] @ transition(params, cache, path[k - 1], path[k]))
    Wp = S[-1] @ params.W2[path[-1]]
    return S, Wp


def norm_of(x: np.ndarray, norm: str) -> np.ndarray:
    if norm == "L1":
        return np.abs(x).sum(axis=-1)
    return np.sqrt((x * x).sum(axis=-1))


def norm_grad(x: np.ndarray, norm: str) -> np.ndarray:
    """Subgradient of the norm; zero at the origin."""
    if norm == "L1":
        return np.sign(x)
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def _mv(A, x):
    return np.einsum("...ij,...j->...i", A, x)


def _mtv(A, x):
    return np.einsum("...ji,...j->...i", A, x)


def triple_residual(params: ModelParams, h, r, t) -> np.ndarray:
    """``W1[r] h + (r - W2[r] t)`` for arrays of ids.

    The grouping matches the single-edge path residual so that ``(r,)`` and
    the direct term tie exactly.
    """
    return _mv(params.W1[r], params.entity[h]) + (params.relation[r] - _mv(params.W2[r], params.entity[t]))


def _apply_T(params, cache, prev, nxt, x):
    if params.m_mode == "learned":
        M = _learned_stack(params, cache, prev, nxt)
        return _mv(M, x)
    return _mv(params.W2[prev], _mv(cache.pinv_W1[nxt], x))


def _apply_T_transpose(params, cache, prev, nxt, x):
    if params.m_mode == "learned":
        M = _learned_stack(params, cache, prev, nxt)
        return _mtv(M, x)
    return _mtv(cache.pinv_W1[nxt], _mtv(params.W2[prev], x))


def _learned_stack(params, cache, prev, nxt):
    prev = np.atleast_1d(prev)
    nxt = np.atleast_1d(nxt)
    return np.stack([transition(params, cache, int(a), int(b)) for a, b in zip(prev, nxt)])


def path_residual_vectors(params: ModelParams, cache: TransitionCache, hvec, rels, tvec) -> np.ndarray:
    """Path residual for batches of head/tail *vectors* and equal-length paths.

    ``rels`` has shape ``(B, n)``. Evaluated inside out as
    ``W1[r1] h + r1 + T2 (r2 + T3 (... + Tn (rn - W2[rn] t)))``.
    """
    rels = np.asarray(rels, dtype=np.int64)
    n = rels.shape[-1]
    acc = params.relation[rels[:, -1]] - _mv(params.W2[rels[:, -1]], tvec)
    for k in range(n - 1, 0, -1):
        acc = _apply_T(params, cache, rels[:, k - 1], rels[:, k], acc)
        acc = params.relation[rels[:, k - 1]] + acc
    return _mv(params.W1[rels[:, 0]], hvec) + acc


def path_relation_grads(params: ModelParams, cache: TransitionCache, rels, s) -> list:
    """``[S^1.T s, ..., S^n.T s]``: gradient of ``s . residual`` with respect to each relation vector."""
    rels = np.asarray(rels, dtype=np.int64)
    out = [s]
    g = s
    for k in range(1, rels.shape[-1]):
        g = _apply_T_transpose(params, cache, rels[:, k - 1], rels[:, k], g)
        out.append(g)
    return out


def path_energy(params: ModelParams, cache: TransitionCache, h: int, path, t: int) -> float:
    """Energy of ``path`` connecting entity ids ``h`` and ``t``."""
    _check_cache(params, cache)
    rels = np.asarray([tuple(path)], dtype=np.int64)
    e = path_residual_vectors(params, cache, params.entity[[h]], rels, params.entity[[t]])
    return float(norm_of(e, params.norm)[0])


def triple_energy(params: ModelParams, h: int, r: int, t: int) -> float:
    """Energy of the triple, i.e. the one-step path ``(r,)``."""
    return float(norm_of(triple_residual(params, h, r, t), params.norm))


def step_pooled_energy(params: ModelParams, cache: TransitionCache, h: int, path_set: PathSet, step: int, t: int):
    """Minimum path energy among the ``step``-relation paths, or ``(inf, None)``."""
    best, arg = math.inf, None
    for inst in path_set[step]:
        e = path_energy(params, cache, h, inst.path, t)
        if e < best:
            best, arg = e, inst.path
    return best, arg


@dataclass
class EnergyBreakdown:
    direct: float
    per_step: dict
    final: float
    winner: object  # "direct" or the winning step count

    @property
    def winning_path(self):
        if self.winner == "direct":
            return None
        return self.per_step[self.winner][1]


def final_energy(params: ModelParams, cache: TransitionCache, h: int, r: int, t: int, path_set: PathSet, max_steps=None) -> EnergyBreakdown:
    """Two-level min pooling over the direct energy and per-step pooled path energies.

    Ties go to the direct term, then to the smaller step count, then to the
    earlier path in list order.
    """
    direct = triple_energy(params, h, r, t)
    steps = range(1, (max_steps or max(path_set.by_step, default=0)) + 1)
    per_step = {}
    final, winner = direct, "direct"
    for i in steps:
        e, arg = step_pooled_energy(params, cache, h, path_set, i, t)
        if arg is not None:
            per_step[i] = (e, arg)
        if e < final:
            final, winner = e, i
    return EnergyBreakdown(direct, per_step, final, winner)
