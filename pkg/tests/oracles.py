"""Independent reference implementations used by the tests.

Everything here works on the raw list of train triples with nested loops,
deliberately sharing no code with the package.
"""

from collections import Counter
from fractions import Fraction

import numpy as np


def out_degree(triples):
    return Counter(h for h, _, _ in triples)


def walks(triples, h, t, max_steps, cap=None):
    """Set of ``(relations, nodes)`` walks of length 1..max_steps (max 3) from h to t."""
    deg = out_degree(triples)
    ok = lambda n: cap is None or deg[n] <= cap  # noqa: E731
    found = set()
    for a, r1, b in triples:
        if a != h:
            continue
        if b == t:
            found.add(((r1,), (h, b)))
        if max_steps < 2 or not ok(b):
            continue
        for c, r2, d in triples:
            if c != b:
                continue
            if d == t:
                found.add(((r1, r2), (h, b, d)))
            if max_steps < 3 or not ok(d):
                continue
            for e, r3, f in triples:
                if e == d and f == t:
                    found.add(((r1, r2, r3), (h, b, d, f)))
    return found


def reliability(triples, h, path, t, cap=None, exact=False):
    """Resource reaching ``t``: ``R(m) = sum over predecessors n of R(n) / |succ(n, r_i)|``.

    Predecessors are summed in ascending id order. ``exact`` switches to
    rational arithmetic.
    """
    deg = out_degree(triples)
    resource = {h: Fraction(1) if exact else 1.0}
    for i, r in enumerate(path):
        nxt = {}
        for node in sorted(resource):
            if i > 0 and cap is not None and deg[node] > cap:
                continue
            amount = resource[node]
            succ = sorted(b for a, rr, b in triples if a == node and rr == r)
            for b in succ:
                nxt[b] = nxt.get(b, 0) + amount / len(succ)
        resource = nxt
    return resource.get(t, 0)


def stats(triples, entities, max_steps, cap=None):
    """``(N(p), N(r, p))`` by literal counting over every ordered pair."""
    n_p, n_rp = Counter(), Counter()
    for x in entities:
        for y in entities:
            types = {rels for rels, _ in walks(triples, x, y, max_steps, cap)}
            direct = {r for a, r, b in triples if a == x and b == y}
            for p in types:
                n_p[p] += 1
                for r in direct:
                    n_rp[(r, p)] += 1
    return n_p, n_rp


def path_set(triples, entities, h, r, t, max_steps, training, floor, cap=None, counts=None):
    """List of ``(path, reliability, confidence)`` sorted by (length, path)."""
    n_p, n_rp = counts if counts is not None else stats(triples, entities, max_steps, cap)
    out = []
    for p in sorted({rels for rels, _ in walks(triples, h, t, max_steps, cap)}, key=lambda q: (len(q), q)):
        if training and p == (r,):
            continue
        rel = reliability(triples, h, p, t, cap)
        conf = n_rp[(r, p)] / n_p[p] if n_p[p] else 0.0
        if conf == 0 or rel < floor:
            continue
        out.append((p, rel, conf))
    return out


# ---------------------------------------------------------------------------
# energies


def transe(h, r, t):
    return float(np.sum(np.abs(h + r - t)))


def pinv_normal_equations(A):
    """Pseudo-inverse of a full-rank square matrix via ``(A^T A)^-1 A^T``."""
    return np.linalg.solve(A.T @ A, A.T)


def path_energy_explicit(W1, W2, R, h, path, t, ord=1):
    """Sum form with explicitly multiplied sequence matrices."""
    d = len(h)
    S = np.eye(d)
    total = W1[path[0]] @ h + R[path[0]]
    for k in range(1, len(path)):
        T = W2[path[k - 1]] @ pinv_normal_equations(W1[path[k]])
        S = S @ T
        total = total + S @ R[path[k]]
    total = total - S @ W2[path[-1]] @ t
    return float(np.linalg.norm(total, ord=ord))


# ---------------------------------------------------------------------------
# ranking


def ranks(score, triples, known, n_entities):
    """Raw and filtered (tail, head) ranks by exhaustive comparison loops.

    ``score(h, r, t)`` gives the energy of any triple; ``known`` is a set of
    all facts. Returns a list of dicts, two per triple (tail side first).
    """
    out = []
    for h, r, t in triples:
        for side in ("tail", "head"):
            target = score(h, r, t)
            raw = filt = 1
            for e in range(n_entities):
                cand = (h, r, e) if side == "tail" else (e, r, t)
                if cand == (h, r, t):
                    continue
                if score(*cand) < target:
                    raw += 1
                    if cand not in known:
                        filt += 1
            out.append({"triple": (h, r, t), "side": side, "raw": raw, "filtered": filt})
    return out
