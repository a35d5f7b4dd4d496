"""Attribute-difference explanations and their sentence rendering."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass

import numpy as np

from .agent import ranked_counterfactuals, rollout
from .ckg import ATTRIBUTE, ITEM, USER, CollabKG
from .recommender import LatentFactors, RecList

logger = logging.getLogger(__name__)

TEMPLATE = ("Had a minimal set of attributes [{attrs}] been different for item {item}, "
            "the recommended item would have been {cf} instead.")
_PATTERN = re.compile(r"^Had a minimal set of attributes \[(.*)\] been different for item (.+), "
                      r"the recommended item would have been (.+) instead\.$")


@dataclass(frozen=True)
class ExplanationRecord:
    user: int
    item: int
    counterfactual_item: int
    delta: tuple  # sorted dense attribute indices
    text: str

    @property
    def delta_size(self) -> int:
        return len(self.delta)

    def to_json(self, names: dict | None = None, ckg: CollabKG | None = None) -> dict:
        """JSON row; with ``ckg`` the ids are reported as raw dataset ids."""
        names = names or {}
        if ckg is None:
            user, item, cf, delta_ids = self.user, self.item, self.counterfactual_item, list(self.delta)
        else:
            user, item = int(ckg.user_ids[self.user]), int(ckg.item_ids[self.item])
            cf = int(ckg.item_ids[self.counterfactual_item])
            delta_ids = [int(ckg.attribute_ids[p]) for p in self.delta]
        return {
            "user": user,
            "item": item,
            "counterfactual_item": cf,
            "delta_ids": delta_ids,
            "delta_names": [_name(names, ATTRIBUTE, p) for p in self.delta],
            "text": self.text,
            "delta_size": self.delta_size,
        }


def extract_attributes(ckg: CollabKG, i: int, j: int) -> tuple[int, ...]:
    """Attributes linked to ``j`` but not to ``i``."""
    return tuple(int(p) for p in np.setdiff1d(ckg.item_attributes(j), ckg.item_attributes(i)))


def name_table(ckg: CollabKG, raw_names: dict) -> dict:
    """Re-key a ``(kind, raw id) -> name`` table by dense index."""
    ids = {USER: ckg.user_ids, ITEM: ckg.item_ids, ATTRIBUTE: ckg.attribute_ids}
    out = {}
    for kind, raw in ids.items():
        for idx, r in enumerate(raw):
            name = raw_names.get((kind, int(r)))
            if name is not None:
                out[(kind, idx)] = name
    return out


def _name(names: dict, kind: str, idx: int) -> str:
    name = names.get((kind, int(idx)))
    if name is None:
        return str(int(idx))
    return name


def render_explanation(u: int, i: int, j: int, delta, names: dict | None = None) -> str:
    """Counterfactual sentence; names missing from the table fall back to the index."""
    if not len(delta):
        raise ValueError("cannot render an empty attribute set")
    names = names or {}
    attrs = ", ".join(_name(names, ATTRIBUTE, p) for p in sorted(int(p) for p in delta))
    return TEMPLATE.format(attrs=attrs, item=_name(names, ITEM, i), cf=_name(names, ITEM, j))


def _reverse(names: dict, kind: str) -> dict:
    return {v: idx for (k, idx), v in names.items() if k == kind}


def _resolve(token: str, rev: dict) -> int:
    if token in rev:
        return rev[token]
    if re.fullmatch(r"\d+", token):
        return int(token)
    raise ValueError(f"unknown name {token!r}")


def _split_names(text: str, rev: dict) -> list[int]:
    """Split a ", "-joined list back into ids; names may themselves contain ", "."""
    parts = text.split(", ")
    n = len(parts)
    # best[k]: ids for parts[:k], or None
    best: list = [None] * (n + 1)
    best[0] = []
    for end in range(1, n + 1):
        for start in range(end):
            if best[start] is None:
                continue
            token = ", ".join(parts[start:end])
            try:
                best[end] = best[start] + [_resolve(token, rev)]
                break
            except ValueError:
                continue
    if best[n] is None:
        raise ValueError(f"cannot parse attribute list {text!r}")
    return best[n]


def parse_explanation(text: str, names: dict | None = None) -> tuple[int, int, tuple[int, ...]]:
    """Inverse of :func:`render_explanation`: ``(i, j, delta)``."""
    names = names or {}
    m = _PATTERN.match(text)
    if not m:
        raise ValueError("text does not follow the explanation template")
    items = _reverse(names, ITEM)
    delta = tuple(sorted(_split_names(m.group(1), _reverse(names, ATTRIBUTE))))
    return _resolve(m.group(2), items), _resolve(m.group(3), items), delta


def make_record(ckg: CollabKG, u: int, i: int, candidates, names: dict | None = None) -> ExplanationRecord | None:
    """Record for the first candidate with a non-empty attribute difference."""
    for j in candidates:
        delta = extract_attributes(ckg, i, j)
        if delta:
            return ExplanationRecord(u, i, int(j), delta, render_explanation(u, i, j, delta, names))
        logger.info("empty attribute difference for (%d, %d, %d); trying the next item", u, i, j)
    return None


def explain_pair(u: int, i: int, ckg: CollabKG, sampler, factors: LatentFactors, rec_list: RecList,
                 mask: np.ndarray, T: int, gamma: float = 0.95, names: dict | None = None,
                 rng: np.random.Generator | None = None) -> ExplanationRecord | None:
    """Greedy rollout from ``(u, i)`` with frozen parameters, then extraction."""
    rng = rng if rng is not None else np.random.default_rng(0)
    traj = rollout(u, i, T, gamma, sampler, factors, rec_list, mask, rng, greedy=True)
    return make_record(ckg, u, i, ranked_counterfactuals(traj), names)


def write_jsonl(records, path, names: dict | None = None, header: dict | None = None,
                ckg: CollabKG | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header is not None:
            f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for r in records:
            f.write(json.dumps(r.to_json(names, ckg), sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                row = json.loads(line)
                if "header" not in row:
                    out.append(row)
    return out
