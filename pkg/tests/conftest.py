import sys

import numpy as np
import pytest

from cerec.ckg import InteractionSet, Triple, build_ckg
from cerec.embed import EmbeddingTable
from cerec.oracle import load_fixture


@pytest.fixture(scope="session")
def tiny():
    return load_fixture("tiny")


@pytest.fixture(scope="session")
def small():
    return load_fixture("small")


def make_graph(item_attrs: dict, interactions=None):
    """CKG from ``{item: [attribute entity ids]}``; items align to themselves.

    Attribute entity ids must not collide with item ids. Without explicit
    interactions, user 0 interacts with every item.
    """
    items = sorted(item_attrs)
    pairs = interactions if interactions is not None else [(0, i) for i in items]
    triples = [Triple(i, 1, p) for i in items for p in item_attrs[i]]
    return build_ckg(InteractionSet.of(pairs), triples, {i: i for i in items})


def table(ckg, vectors) -> EmbeddingTable:
    v = np.asarray(vectors, dtype=float)
    assert v.shape[0] == ckg.n_entities
    return EmbeddingTable(v, ckg.n_users, ckg.n_items)


def write(path, text: str):
    path.write_text(text, encoding="utf-8")
    return path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
