"""Collaborative knowledge graph: loading, preprocessing and typed adjacency.

Users, items and attributes are stored with dense ids per kind. The graph
learning module works on a single global index laid out as
``[users | items | attributes]``; :meth:`CollabKG.global_index` converts.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

USER, ITEM, ATTRIBUTE = "user", "item", "attribute"
KINDS = (USER, ITEM, ATTRIBUTE)

# relation id reserved for the user-item interaction edge
INTERACTION_RELATION = 0


class ParseError(ValueError):
    """Malformed input line."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class CKGBuildError(ValueError):
    pass


class EntityId(NamedTuple):
    id: int
    kind: str


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class RelationVocab:
    """Relation name <-> id mapping. Id 0 is the interaction relation."""

    def __init__(self, names: dict[int, str] | None = None):
        self._by_name: dict[str, int] = {}
        self._by_id: dict[int, str] = {}
        for rid, name in sorted((names or {INTERACTION_RELATION: "interact"}).items()):
            self._by_name[name] = rid
            self._by_id[rid] = name

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def id(self, name: str) -> int:
        """Id for ``name``, allocating a fresh one if unseen."""
        if name not in self._by_name:
            rid = max(self._by_id, default=-1) + 1
            self._by_name[name] = rid
            self._by_id[rid] = name
        return self._by_name[name]

    def name(self, rid: int) -> str:
        return self._by_id[rid]

    def items(self):
        return sorted(self._by_id.items())

    def save(self, path, header: str | None = None) -> None:
        with open(path, "w", encoding="utf-8") as f:
            if header:
                f.write(header)
            for rid, name in self.items():
                f.write(f"{rid}\t{name}\n")

    @classmethod
    def load(cls, path) -> "RelationVocab":
        names = {}
        for lineno, fields in _read_tsv(path):
            if len(fields) != 2:
                raise ParseError(path, lineno, f"expected 2 fields, got {len(fields)}")
            names[_to_int(fields[0], path, lineno)] = fields[1]
        return cls(names)


@dataclass(frozen=True)
class InteractionSet:
    """Deduplicated binary implicit feedback."""

    pairs: frozenset = frozenset()
    duplicates: int = 0

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(sorted(self.pairs))

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.pairs

    def users(self) -> list[int]:
        return sorted({u for u, _ in self.pairs})

    def items(self) -> list[int]:
        return sorted({i for _, i in self.pairs})

    def by_user(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = defaultdict(list)
        for u, i in sorted(self.pairs):
            out[u].append(i)
        return dict(out)

    @classmethod
    def of(cls, pairs: Iterable[tuple[int, int]]) -> "InteractionSet":
        return cls(frozenset((int(u), int(i)) for u, i in pairs))


def _read_tsv(path) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def _to_int(s: str, path, lineno: int) -> int:
    try:
        v = int(s)
    except ValueError:
        raise ParseError(path, lineno, f"not an integer: {s!r}") from None
    if v < 0:
        raise ParseError(path, lineno, f"negative id: {v}")
    return v


def load_triples(path, vocab: RelationVocab | None = None) -> list[Triple]:
    """Parse ``head<TAB>relation<TAB>tail`` lines.

    Relation names are mapped through ``vocab`` (mutated in place when new
    names are seen). Blank lines and ``#`` comments are skipped.
    """
    vocab = vocab if vocab is not None else RelationVocab()
    triples = []
    for lineno, fields in _read_tsv(path):
        if len(fields) != 3:
            raise ParseError(path, lineno, f"expected 3 fields, got {len(fields)}")
        head = _to_int(fields[0], path, lineno)
        tail = _to_int(fields[2], path, lineno)
        triples.append(Triple(head, vocab.id(fields[1]), tail))
    return triples


def load_interactions(path) -> InteractionSet:
    pairs = set()
    dup = 0
    for lineno, fields in _read_tsv(path):
        if len(fields) != 2:
            raise ParseError(path, lineno, f"expected 2 fields, got {len(fields)}")
        pair = (_to_int(fields[0], path, lineno), _to_int(fields[1], path, lineno))
        if pair in pairs:
            dup += 1
        pairs.add(pair)
    if dup:
        logger.info("%s: collapsed %d duplicate interactions", path, dup)
    return InteractionSet(frozenset(pairs), dup)


def load_alignment(path) -> dict[int, int]:
    alignment = {}
    for lineno, fields in _read_tsv(path):
        if len(fields) != 2:
            raise ParseError(path, lineno, f"expected 2 fields, got {len(fields)}")
        alignment[_to_int(fields[0], path, lineno)] = _to_int(fields[1], path, lineno)
    return alignment


def save_interactions(interactions: InteractionSet, path, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(header)
        for u, i in interactions:
            f.write(f"{u}\t{i}\n")


def save_triples(triples: list[Triple], path, vocab: RelationVocab, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(header)
        for h, r, t in triples:
            f.write(f"{h}\t{vocab.name(r)}\t{t}\n")


def apply_k_core(interactions: InteractionSet, k: int) -> InteractionSet:
    """Drop users and items with fewer than ``k`` interactions, to a fixed point."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pairs = set(interactions.pairs)
    while True:
        ucount = Counter(u for u, _ in pairs)
        icount = Counter(i for _, i in pairs)
        keep = {(u, i) for u, i in pairs if ucount[u] >= k and icount[i] >= k}
        if len(keep) == len(pairs):
            return InteractionSet(frozenset(keep))
        pairs = keep


def filter_infrequent(
    triples: list[Triple],
    entity_min: int = 10,
    relation_min: int = 50,
    protected: Iterable[int] = (),
) -> list[Triple]:
    """Relation filter then entity filter, repeated until nothing changes.

    Entities in ``protected`` (aligned item entities) are exempt from the
    entity threshold; only attribute entities are counted against it.
    """
    if entity_min < 1 or relation_min < 1:
        raise ValueError("thresholds must be >= 1")
    protected = set(protected)
    current = list(triples)
    while True:
        rcount = Counter(t.relation for t in current)
        kept = [t for t in current if rcount[t.relation] >= relation_min]
        ecount = Counter()
        for h, _, t in kept:
            ecount[h] += 1
            ecount[t] += 1
        kept = [
            t for t in kept
            if (t.head in protected or ecount[t.head] >= entity_min)
            and (t.tail in protected or ecount[t.tail] >= entity_min)
        ]
        if len(kept) == len(current):
            return kept
        current = kept


def split_interactions(
    interactions: InteractionSet,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> tuple[InteractionSet, InteractionSet, InteractionSet]:
    """Per-user stratified train/valid/test split."""
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    short = 0
    for u, items in sorted(interactions.by_user().items()):
        n = len(items)
        if n < 3:
            short += 1
            parts[0].extend((u, i) for i in items)
            continue
        order = [items[j] for j in rng.permutation(n)]
        n_valid = int(np.floor(n * ratios[1] + 0.5))
        n_test = int(np.floor(n * ratios[2] + 0.5))
        n_train = n - n_valid - n_test
        parts[0].extend((u, i) for i in order[:n_train])
        parts[1].extend((u, i) for i in order[n_train:n_train + n_valid])
        parts[2].extend((u, i) for i in order[n_train + n_valid:])
    if short:
        logger.info("%d users with < 3 interactions kept entirely in train", short)
    return tuple(InteractionSet.of(p) for p in parts)


def _csr(n_rows: int, edges: Iterable[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    rows: list[list[int]] = [[] for _ in range(n_rows)]
    for a, b in edges:
        rows[a].append(b)
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    for r, nb in enumerate(rows):
        nb.sort()
        indptr[r + 1] = indptr[r] + len(nb)
    indices = np.fromiter((b for nb in rows for b in nb), dtype=np.int64, count=int(indptr[-1]))
    indptr.setflags(write=False)
    indices.setflags(write=False)
    return indptr, indices


@dataclass(frozen=True, eq=False)
class CollabKG:
    user_ids: np.ndarray  # dense -> raw user id
    item_ids: np.ndarray  # dense -> raw item id
    attribute_ids: np.ndarray  # dense -> raw KG entity id
    item_entity: np.ndarray  # dense item -> KG entity id
    adj: dict = field(repr=False)  # (kind, target kind) -> (indptr, indices)
    relations: dict = field(repr=False)  # (item, attribute) -> sorted relation ids
    n_triples: int = 0

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_attributes(self) -> int:
        return len(self.attribute_ids)

    @property
    def n_entities(self) -> int:
        return self.n_users + self.n_items + self.n_attributes

    def count(self, kind: str) -> int:
        return {USER: self.n_users, ITEM: self.n_items, ATTRIBUTE: self.n_attributes}[kind]

    def offset(self, kind: str) -> int:
        return {USER: 0, ITEM: self.n_users, ATTRIBUTE: self.n_users + self.n_items}[kind]

    def global_index(self, kind: str, idx) -> np.ndarray | int:
        return self.offset(kind) + idx

    def neighbors(self, kind: str, idx: int, target: str) -> np.ndarray:
        """Dense ids of ``target``-kind neighbors, ascending."""
        if not 0 <= idx < self.count(kind):
            raise KeyError(f"unknown {kind} {idx}")
        key = (kind, target)
        if key not in self.adj:
            return np.empty(0, dtype=np.int64)
        indptr, indices = self.adj[key]
        return indices[indptr[idx]:indptr[idx + 1]]

    def degree(self, kind: str, idx: int) -> int:
        return sum(len(self.neighbors(kind, idx, t)) for t in KINDS)

    def item_attributes(self, i: int) -> np.ndarray:
        return self.neighbors(ITEM, i, ATTRIBUTE)

    def attribute_items(self, p: int) -> np.ndarray:
        return self.neighbors(ATTRIBUTE, p, ITEM)

    def user_items(self, u: int) -> np.ndarray:
        return self.neighbors(USER, u, ITEM)

    def user_index(self, raw: int) -> int:
        return _lookup(self.user_ids, raw, USER)

    def item_index(self, raw: int) -> int:
        return _lookup(self.item_ids, raw, ITEM)

    def attribute_index(self, raw: int) -> int:
        return _lookup(self.attribute_ids, raw, ATTRIBUTE)

    def adjacency_matrix(self) -> sp.csr_matrix:
        """Symmetric binary adjacency over the global index."""
        rows, cols = [], []
        for (kind, target), (indptr, indices) in self.adj.items():
            counts = np.diff(indptr)
            src = np.repeat(np.arange(len(counts)), counts) + self.offset(kind)
            rows.append(src)
            cols.append(indices + self.offset(target))
        n = self.n_entities
        if not rows:
            return sp.csr_matrix((n, n))
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        return sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))


def _lookup(ids: np.ndarray, raw: int, kind: str) -> int:
    pos = int(np.searchsorted(ids, raw))
    if pos >= len(ids) or ids[pos] != raw:
        raise KeyError(f"unknown {kind} id {raw}")
    return pos


def build_ckg(
    interactions: InteractionSet,
    triples: list[Triple],
    alignment: dict[int, int],
    edges: InteractionSet | None = None,
) -> CollabKG:
    """Join interactions and item knowledge into one graph.

    Users and items come from ``interactions``; user-item edges come from
    ``edges`` when given (e.g. the training split only), else from
    ``interactions``.

    A triple becomes an item-attribute edge when exactly one end is the
    entity of an interacted item. Triples between two items, between two
    non-item entities, or touching entities of items absent from the
    interactions are skipped and counted in the log.
    """
    items = interactions.items()
    missing = [i for i in items if i not in alignment]
    if missing:
        raise CKGBuildError(f"item {missing[0]} has no alignment entry")
    users = interactions.users()
    user_ids = np.asarray(users, dtype=np.int64)
    item_ids = np.asarray(items, dtype=np.int64)
    uidx = {u: k for k, u in enumerate(users)}
    iidx = {i: k for k, i in enumerate(items)}
    ent2item = {alignment[i]: iidx[i] for i in items}
    aligned = set(alignment.values())

    ia_rel: dict[tuple[int, int], set] = defaultdict(set)
    skipped = 0
    for h, r, t in triples:
        if h == t:
            skipped += 1
            continue
        hi, ti = ent2item.get(h), ent2item.get(t)
        if hi is not None and ti is None and t not in aligned:
            ia_rel[(hi, t)].add(r)
        elif ti is not None and hi is None and h not in aligned:
            ia_rel[(ti, h)].add(r)
        else:
            skipped += 1
    if skipped:
        logger.info("skipped %d triples that are not item-attribute edges", skipped)

    attrs = sorted({p for _, p in ia_rel})
    attribute_ids = np.asarray(attrs, dtype=np.int64)
    pidx = {p: k for k, p in enumerate(attrs)}
    ia_edges = sorted((i, pidx[p]) for i, p in ia_rel)
    ui_edges = sorted((uidx[u], iidx[i]) for u, i in (edges if edges is not None else interactions).pairs)

    adj = {
        (USER, ITEM): _csr(len(users), ui_edges),
        (ITEM, USER): _csr(len(items), ((i, u) for u, i in ui_edges)),
        (ITEM, ATTRIBUTE): _csr(len(items), ia_edges),
        (ATTRIBUTE, ITEM): _csr(len(attrs), ((p, i) for i, p in ia_edges)),
    }
    relations = {(i, pidx[p]): tuple(sorted(rs)) for (i, p), rs in ia_rel.items()}
    item_entity = np.asarray([alignment[i] for i in items], dtype=np.int64)
    for arr in (user_ids, item_ids, attribute_ids, item_entity):
        arr.setflags(write=False)
    return CollabKG(
        user_ids=user_ids,
        item_ids=item_ids,
        attribute_ids=attribute_ids,
        item_entity=item_entity,
        adj=adj,
        relations=relations,
        n_triples=len(triples) - skipped,
    )


def neighbors(ckg: CollabKG, e: EntityId, kind: str) -> list[int]:
    """Kind-filtered neighbors of ``e`` in ascending dense id order."""
    return [int(x) for x in ckg.neighbors(e.kind, e.id, kind)]


def remap_interactions(ckg: CollabKG, interactions: InteractionSet) -> InteractionSet:
    """Translate raw (user, item) ids to dense ids; unknown pairs are dropped."""
    uid = {int(u): k for k, u in enumerate(ckg.user_ids)}
    iid = {int(i): k for k, i in enumerate(ckg.item_ids)}
    pairs = [(uid[u], iid[i]) for u, i in interactions.pairs if u in uid and i in iid]
    dropped = len(interactions) - len(pairs)
    if dropped:
        logger.info("dropped %d interactions with unknown user/item", dropped)
    return InteractionSet.of(pairs)


def density(n_interactions: int, n_users: int, n_items: int) -> float:
    return n_interactions / (n_users * n_items)


def ckg_stats(ckg: CollabKG, interactions: InteractionSet) -> dict:
    n = len(interactions)
    return {
        "users": ckg.n_users,
        "items": ckg.n_items,
        "interactions": n,
        "density": density(n, ckg.n_users, ckg.n_items) if ckg.n_users and ckg.n_items else 0.0,
        "entities": ckg.n_items + ckg.n_attributes,
        "attributes": ckg.n_attributes,
        "relations": len({r for rs in ckg.relations.values() for r in rs}),
        "kg_triplets": ckg.n_triples,
    }
