"""Triple loading, graph indexing, reverse augmentation and negative sampling."""

from __future__ import annotations

import difflib
import enum
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

REVERSE_SUFFIX = "^-1"
CATEGORY_THRESHOLD = 1.5
MAX_CORRUPTION_RETRIES = 1000


class DataError(ValueError):
    """Raised for malformed or inconsistent triple data."""


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class ContractError(RuntimeError):
    """An operation was called on an object in the wrong state."""


class SamplingExhaustedError(RuntimeError):
    """No corruption outside the known facts could be drawn."""


class CategoryUnavailableError(KeyError):
    """The relation has no train triples to classify from."""


class ColumnOrder(str, enum.Enum):
    HRT = "HRT"
    HTR = "HTR"


class RelationCategory(str, enum.Enum):
    ONE_TO_ONE = "1-to-1"
    ONE_TO_N = "1-to-N"
    N_TO_ONE = "N-to-1"
    N_TO_N = "N-to-N"


def reverse(relation: int) -> int:
    """Id of the reverse of ``relation`` (even ids are forward, odd reverse)."""
    return relation ^ 1


def load_triples(path, column_order: ColumnOrder | str = ColumnOrder.HRT) -> list[tuple[str, str, str]]:
    """Read a tab-separated triple file into ``(head, relation, tail)`` labels.

    Blank lines are skipped. Line order is preserved and duplicates are kept.
    """
    order = ColumnOrder(column_order)
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(fields)}")
            if any(not f for f in fields):
                raise ParseError(path, lineno, "empty field")
            if order is ColumnOrder.HRT:
                h, r, t = fields
            else:
                h, t, r = fields
            out.append((h, r, t))
    return out


@dataclass
class Vocabulary:
    """Bijective label <-> dense id mapping."""

    labels: list = field(default_factory=list)
    index: dict = field(default_factory=dict)

    def intern(self, label: str) -> int:
        idx = self.index.get(label)
        if idx is None:
            idx = len(self.labels)
            self.index[label] = idx
            self.labels.append(label)
        return idx

    def resolve(self, idx: int) -> str:
        return self.labels[idx]

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self.index


@dataclass
class LoadReport:
    split_sizes: dict
    duplicates: dict
    n_entities: int
    n_relations: int
    unseen_entities: int
    unseen_relations: int

    def __str__(self):
        lines = [f"entities: {self.n_entities}", f"relations: {self.n_relations}"]
        for name, n in self.split_sizes.items():
            lines.append(f"{name}: {n} triples ({self.duplicates.get(name, 0)} duplicates removed)")
        lines.append(f"entities absent from train: {self.unseen_entities}")
        lines.append(f"relations absent from train: {self.unseen_relations}")
        return "\n".join(lines)


class KnowledgeGraph:
    """Immutable triple store with adjacency indexes over the train split.

    Relation ids are allocated in pairs: the forward relation with label
    index ``k`` gets id ``2k`` and its reverse ``2k + 1``, so embedding tables
    sized ``n_relations`` stay valid before and after augmentation.

    Parameters
    ----------
    entities, relations : list of str
        Entity labels and *forward* relation labels.
    splits : dict of str -> ndarray of shape (n, 3)
        Integer triples ``(head, relation, tail)`` per split.
    augmented : bool
        Whether train already contains the reverse of every triple.
    """

    def __init__(self, entities, relations, splits, augmented=False, report=None):
        self.entities = Vocabulary(list(entities), {l: i for i, l in enumerate(entities)})
        self.relation_labels = list(relations)
        self.relations = Vocabulary(
            [lab for l in relations for lab in (l, l + REVERSE_SUFFIX)],
            {},
        )
        self.relations.index = {l: i for i, l in enumerate(self.relations.labels)}
        self.splits = {k: np.asarray(v, dtype=np.int64).reshape(-1, 3) for k, v in splits.items()}
        for name in ("train", "valid", "test"):
            self.splits.setdefault(name, np.zeros((0, 3), dtype=np.int64))
        for arr in self.splits.values():
            arr.setflags(write=False)
        self.augmented = augmented
        self.report = report

        self.n_entities = len(self.entities)
        self.n_relations = 2 * len(self.relation_labels)

        self._membership_keys = np.unique(
            np.concatenate([self.encode(a) for a in self.splits.values()])
        )
        self.membership = frozenset(map(tuple, np.concatenate(list(self.splits.values())).tolist()))
        self._train_set = frozenset(map(tuple, self.train.tolist()))

        self.out_index: dict[int, dict[int, tuple]] = {}
        self.in_index: dict[int, dict[int, tuple]] = {}
        out_tmp: dict = {}
        in_tmp: dict = {}
        for h, r, t in self.train.tolist():
            out_tmp.setdefault(h, {}).setdefault(r, []).append(t)
            in_tmp.setdefault(t, {}).setdefault(r, []).append(h)
        for src, dst in ((out_tmp, self.out_index), (in_tmp, self.in_index)):
            for node, by_rel in src.items():
                dst[node] = {r: tuple(sorted(v)) for r, v in sorted(by_rel.items())}

        self._tph, self._hpt = self._mapping_stats()

    @property
    def train(self) -> np.ndarray:
        return self.splits["train"]

    @property
    def valid(self) -> np.ndarray:
        return self.splits["valid"]

    @property
    def test(self) -> np.ndarray:
        return self.splits["test"]

    def encode(self, triples) -> np.ndarray:
        """Pack integer triples into sortable int64 keys."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return (triples[:, 0] * self.n_relations + triples[:, 1]) * self.n_entities + triples[:, 2]

    def contains(self, triples) -> np.ndarray:
        """Vectorized membership over all splits."""
        keys = self.encode(triples)
        pos = np.searchsorted(self._membership_keys, keys)
        pos = np.minimum(pos, len(self._membership_keys) - 1)
        if len(self._membership_keys) == 0:
            return np.zeros(len(keys), dtype=bool)
        return self._membership_keys[pos] == keys

    def __contains__(self, triple):
        return tuple(int(x) for x in triple) in self.membership

    def in_train(self, triple) -> bool:
        return tuple(int(x) for x in triple) in self._train_set

    def successors(self, node: int, relation: int) -> tuple:
        return self.out_index.get(node, {}).get(relation, ())

    def predecessors(self, node: int, relation: int) -> tuple:
        return self.in_index.get(node, {}).get(relation, ())

    def out_degree(self, node: int) -> int:
        return sum(len(v) for v in self.out_index.get(node, {}).values())

    def in_degree(self, node: int) -> int:
        return sum(len(v) for v in self.in_index.get(node, {}).values())

    def relations_between(self, h: int, t: int) -> list[int]:
        return [r for r, tails in self.out_index.get(h, {}).items() if t in tails]

    def triple(self, h: str, r: str, t: str) -> tuple[int, int, int]:
        """Resolve labels to ids, raising ``KeyError`` with close matches."""
        return (
            _lookup(self.entities, h, "entity"),
            _lookup(self.relations, r, "relation"),
            _lookup(self.entities, t, "entity"),
        )

    def _mapping_stats(self):
        train = self.train
        counts = np.bincount(train[:, 1], minlength=self.n_relations).astype(float)
        heads = np.bincount(np.unique(train[:, [1, 0]], axis=0)[:, 0], minlength=self.n_relations)
        tails = np.bincount(np.unique(train[:, [1, 2]], axis=0)[:, 0], minlength=self.n_relations)
        with np.errstate(invalid="ignore", divide="ignore"):
            tph = np.where(heads > 0, counts / np.maximum(heads, 1), 0.0)
            hpt = np.where(tails > 0, counts / np.maximum(tails, 1), 0.0)
        return tph, hpt

    def tph(self, relation: int) -> float:
        """Mean number of tails per head for ``relation`` on train."""
        return float(self._tph[relation])

    def hpt(self, relation: int) -> float:
        """Mean number of heads per tail for ``relation`` on train."""
        return float(self._hpt[relation])

    def head_replace_prob(self) -> np.ndarray:
        """Bernoulli probability of corrupting the head, per relation.

        Relations missing from train fall back to 0.5.
        """
        denom = self._tph + self._hpt
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.where(denom > 0, self._tph / denom, 0.5)
        return p

    def fingerprint(self) -> bytes:
        """SHA-256 over vocabularies, split contents and augmentation state."""
        digest = hashlib.sha256()
        digest.update(b"aug" if self.augmented else b"raw")
        for labels in (self.entities.labels, self.relation_labels):
            digest.update(len(labels).to_bytes(8, "little"))
            for label in labels:
                digest.update(label.encode("utf-8") + b"\0")
        for name in sorted(self.splits):
            digest.update(name.encode() + b"\0")
            digest.update(np.ascontiguousarray(self.splits[name], dtype="<i8").tobytes())
        return digest.digest()


def _lookup(vocab: Vocabulary, label: str, kind: str) -> int:
    try:
        return vocab.index[label]
    except KeyError:
        near = difflib.get_close_matches(label, vocab.labels, n=5, cutoff=0.4)
        raise KeyError(f"unknown {kind} {label!r}; nearest: {', '.join(near) or 'none'}") from None


def build_graph(
    train: Sequence[tuple[str, str, str]],
    valid: Sequence[tuple[str, str, str]] = (),
    test: Sequence[tuple[str, str, str]] = (),
) -> KnowledgeGraph:
    """Intern labels over all splits and deduplicate triples within each split."""
    entities = Vocabulary()
    relations = Vocabulary()
    splits = {}
    duplicates = {}
    sizes = {}
    for name, raw in (("train", train), ("valid", valid), ("test", test)):
        seen = set()
        rows = []
        for h, r, t in raw:
            key = (entities.intern(h), 2 * relations.intern(r), entities.intern(t))
            if key in seen:
                continue
            seen.add(key)
            rows.append(key)
        duplicates[name] = len(raw) - len(rows)
        sizes[name] = len(rows)
        splits[name] = np.array(rows, dtype=np.int64).reshape(-1, 3)
        if duplicates[name]:
            logger.warning("%s: removed %d duplicate triples", name, duplicates[name])

    train_arr = splits["train"]
    seen_ent = set(train_arr[:, 0].tolist()) | set(train_arr[:, 2].tolist())
    seen_rel = set((train_arr[:, 1] // 2).tolist())
    report = LoadReport(
        split_sizes=sizes,
        duplicates=duplicates,
        n_entities=len(entities),
        n_relations=len(relations),
        unseen_entities=len(entities) - len(seen_ent),
        unseen_relations=len(relations) - len(seen_rel),
    )
    return KnowledgeGraph(entities.labels, relations.labels, splits, report=report)


def load_dataset(directory, column_order="HRT", names=("train.txt", "valid.txt", "test.txt")) -> KnowledgeGraph:
    """Load ``train/valid/test`` files from a benchmark directory.

    Missing valid/test files are treated as empty splits.
    """
    directory = Path(directory)
    parts = []
    for i, name in enumerate(names):
        path = directory / name
        if i > 0 and not path.exists():
            parts.append([])
        else:
            parts.append(load_triples(path, column_order))
    return build_graph(*parts)


def add_reverse_relations(graph: KnowledgeGraph) -> KnowledgeGraph:
    """Return a copy of ``graph`` whose train split also holds every ``(t, r^-1, h)``."""
    if graph.augmented:
        raise ContractError("graph already carries reverse relations")
    train = graph.train
    rev = np.stack([train[:, 2], train[:, 1] ^ 1, train[:, 0]], axis=1)
    both = np.concatenate([train, rev])
    splits = dict(graph.splits)
    splits["train"] = both
    report = graph.report
    if report is not None:
        report = LoadReport(
            split_sizes={**report.split_sizes, "train": len(both)},
            duplicates=report.duplicates,
            n_entities=report.n_entities,
            n_relations=2 * report.n_relations,
            unseen_entities=report.unseen_entities,
            unseen_relations=report.unseen_relations,
        )
    return KnowledgeGraph(graph.entities.labels, graph.relation_labels, splits, augmented=True, report=report)


def from_id_triples(n_entities: int, n_forward_relations: int, train, valid=(), test=(), augment=True) -> KnowledgeGraph:
    """Build a graph directly from integer triples whose relations are forward ids ``0..R-1``.

    Used for synthetic data; relation ``k`` is stored as id ``2k``.
    """
    splits = {}
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        arr = np.asarray(rows, dtype=np.int64).reshape(-1, 3).copy()
        arr[:, 1] *= 2
        splits[name] = np.unique(arr, axis=0) if len(arr) else arr
    graph = KnowledgeGraph(
        [f"e{i}" for i in range(n_entities)],
        [f"r{k}" for k in range(n_forward_relations)],
        splits,
    )
    return add_reverse_relations(graph) if augment else graph


def corrupt_triple(graph: KnowledgeGraph, triple, rng: np.random.Generator) -> tuple[int, int, int]:
    """Bernoulli corruption of a single triple; see :func:`corrupt_batch`."""
    return tuple(int(x) for x in corrupt_batch(graph, np.asarray([triple]), rng)[0])


def corrupt_batch(graph: KnowledgeGraph, triples: np.ndarray, rng: np.random.Generator, head_prob=None) -> np.ndarray:
    """Draw one corrupted triple per row.

    The head is replaced with probability ``tph / (tph + hpt)`` of the row's
    relation, otherwise the tail, by a uniform entity. Rows landing on a known
    fact (any split) are redrawn with the same side choice.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if head_prob is None:
        head_prob = graph.head_replace_prob()
    replace_head = rng.random(len(triples)) < head_prob[triples[:, 1]]
    out = triples.copy()
    pending = np.arange(len(triples))
    for _ in range(MAX_CORRUPTION_RETRIES):
        draws = rng.integers(0, graph.n_entities, size=len(pending))
        rows = out[pending]
        heads = replace_head[pending]
        rows[heads, 0] = draws[heads]
        rows[~heads, 2] = draws[~heads]
        rows[heads, 2] = triples[pending[heads], 2]
        rows[~heads, 0] = triples[pending[~heads], 0]
        out[pending] = rows
        bad = graph.contains(rows)
        pending = pending[bad]
        if len(pending) == 0:
            return out
    raise SamplingExhaustedError(
        f"could not corrupt {len(pending)} triples (e.g. {tuple(triples[pending[0]])}) "
        f"after {MAX_CORRUPTION_RETRIES} draws"
    )


def relation_category(graph: KnowledgeGraph, relation: int, threshold: float = CATEGORY_THRESHOLD) -> RelationCategory:
    """Classify ``relation`` by its mean tails-per-head and heads-per-tail on train."""
    if not np.any(graph.train[:, 1] == relation):
        raise CategoryUnavailableError(f"relation {relation} has no train triples")
    tph, hpt = graph.tph(relation), graph.hpt(relation)
    if tph < threshold and hpt < threshold:
        return RelationCategory.ONE_TO_ONE
    if tph >= threshold and hpt < threshold:
        return RelationCategory.ONE_TO_N
    if tph < threshold and hpt >= threshold:
        return RelationCategory.N_TO_ONE
    return RelationCategory.N_TO_N
