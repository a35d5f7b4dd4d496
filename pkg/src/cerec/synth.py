"""Planted-structure synthetic datasets.

Every item carries a few attributes. Each user has a small set of disliked
attributes and never interacts with an item carrying one; among the allowed
items, interactions favour the user's liked attributes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ckg import InteractionSet, RelationVocab, Triple, save_interactions, save_triples

DEFAULT_SPEC = {
    "n_users": 200,
    "n_items": 300,
    "n_attributes": 20,
    "attrs_per_item": 3,
    "n_disliked": 2,
    "n_liked": 2,
    "interactions_per_user": 25,
    "like_strength": 3.0,
    "n_relations": 4,
    "n_groups": 10,
    "n_genres": 0,
}


@dataclass
class PlantedData:
    interactions: InteractionSet
    triples: list
    alignment: dict
    vocab: RelationVocab
    disliked: dict  # raw user id -> sorted raw attribute entity ids
    names: dict = field(default_factory=dict)  # (kind, raw id) -> name
    spec: dict = field(default_factory=dict)


def make_planted(spec: dict | None = None, seed: int = 0) -> PlantedData:
    s = dict(DEFAULT_SPEC)
    s.update(spec or {})
    rng = np.random.default_rng(seed)
    n_u, n_i, n_p = s["n_users"], s["n_items"], s["n_attributes"]
    k = s["attrs_per_item"]
    n_g = s["n_genres"]
    if n_g:
        # one genre attribute per item plus k - 1 non-genre attributes
        item_attrs = [np.sort(np.r_[rng.integers(n_g), rng.choice(np.arange(n_g, n_p), size=k - 1, replace=False)])
                      for _ in range(n_i)]
    else:
        item_attrs = [np.sort(rng.choice(n_p, size=k, replace=False)) for _ in range(n_i)]
    has = np.zeros((n_i, n_p), dtype=bool)
    for i, attrs in enumerate(item_attrs):
        has[i, attrs] = True

    # taste groups share liked attributes; dislikes are drawn per user
    n_groups = s["n_groups"] or n_u
    likeable = n_g if n_g else n_p
    group_liked = [rng.choice(likeable, size=s["n_liked"], replace=False) for _ in range(n_groups)]
    pairs = []
    disliked = {}
    for u in range(n_u):
        liked = group_liked[u % n_groups]
        rest = np.setdiff1d(np.arange(n_g, n_p), liked)
        bad = np.sort(rng.choice(rest, size=s["n_disliked"], replace=False))
        allowed = np.flatnonzero(~has[:, bad].any(axis=1))
        logits = s["like_strength"] * has[allowed][:, liked].sum(axis=1) + rng.gumbel(size=len(allowed))
        n = min(s["interactions_per_user"], len(allowed))
        chosen = allowed[np.argsort(-logits, kind="stable")[:n]]
        pairs.extend((u, int(i)) for i in chosen)
        disliked[u] = [int(n_i + p) for p in bad]

    vocab = RelationVocab()
    rel_ids = [vocab.id(f"rel_{r}") for r in range(s["n_relations"])]
    triples = [Triple(i, rel_ids[int(p) % len(rel_ids)], n_i + int(p))
               for i, attrs in enumerate(item_attrs) for p in attrs]
    alignment = {i: i for i in range(n_i)}
    names = {("item", i): f"item_{i}" for i in range(n_i)}
    names.update({("attribute", n_i + p): f"attr_{p}" for p in range(n_p)})
    names.update({("user", u): f"user_{u}" for u in range(n_u)})
    return PlantedData(InteractionSet.of(pairs), triples, alignment, vocab, disliked, names, s)


def write_planted(data: PlantedData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "interactions": out / "interactions.tsv",
        "triples": out / "triples.tsv",
        "alignment": out / "alignment.tsv",
        "relations": out / "relations.tsv",
        "names": out / "names.tsv",
        "planted": out / "planted.json",
    }
    save_interactions(data.interactions, paths["interactions"])
    save_triples(data.triples, paths["triples"], data.vocab)
    data.vocab.save(paths["relations"])
    with open(paths["alignment"], "w", encoding="utf-8") as f:
        for i, e in sorted(data.alignment.items()):
            f.write(f"{i}\t{e}\n")
    write_names(data.names, paths["names"])
    paths["planted"].write_text(json.dumps(
        {"spec": data.spec, "disliked": {str(u): v for u, v in sorted(data.disliked.items())}},
        indent=1, sort_keys=True))
    return paths


def write_names(names: dict, path, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(header)
        for (kind, rid), name in sorted(names.items()):
            f.write(f"{kind}\t{rid}\t{name}\n")


def read_names(path) -> dict:
    names = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            kind, rid, name = line.split("\t", 2)
            names[(kind, int(rid))] = name
    return names
