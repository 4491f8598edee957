import numpy as np
import pytest

from hmilnet.graph_store import Denylist, Snapshot, collection_from_edges


def make_collection(relations, label="s0"):
    """relations: {name: (cardinality, [(domain, entity), ...])}"""
    return collection_from_edges([(n, c, e) for n, (c, e) in relations.items()], label)


def random_bipartite(rng, n_dom, n_ent, p):
    edges = [(f"d{i}", f"v{j}") for i in range(n_dom) for j in range(n_ent) if rng.random() < p]
    return edges


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def clique_snapshot():
    """Two planted cliques of 6 domains over 3 relations, plus 30 background domains."""
    rel = {}
    r = np.random.default_rng(7)
    for name in ("a", "b", "c"):
        edges = []
        for i in range(6):
            edges.append((f"bad{i}", f"{name}-hub"))
            edges.append((f"evil{i}", f"{name}-hub2"))
        for i in range(30):
            for j in r.choice(15, size=2, replace=False):
                edges.append((f"ok{i}", f"{name}-bg{j}"))
        rel[name] = ("m2m", edges)
    coll = make_collection(rel)
    dl = Denylist({**{f"bad{i}": "fam1" for i in range(5)}, **{f"evil{i}": "fam2" for i in range(5)}})
    return Snapshot(coll, dl)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
