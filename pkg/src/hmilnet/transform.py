"""Domain-only projection of a bipartite relation, computed on demand.

Two domains are adjacent in the projection iff some entity touches both.
Edges are never materialized: a neighborhood is a two-hop traversal
domain -> entities -> domains, so memory stays linear in the base graph even
when a single hub entity would expand into an enormous clique.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph_store import BipartiteGraph

_EMPTY = np.empty(0, dtype=np.int64)


@dataclass(frozen=True)
class TransformedView:
    base: BipartiteGraph
    entity_degree_cap: int | None = None

    def _entities(self, d: int) -> np.ndarray:
        g = self.base
        if not 0 <= d < g.n_domains:
            return _EMPTY
        ents = g.domain_neighbors(d)
        if self.entity_degree_cap is not None and len(ents):
            ents = ents[g.entity_degree[ents] <= self.entity_degree_cap]
        return ents

    def _two_hop(self, d: int) -> np.ndarray:
        g = self.base
        ents = self._entities(d)
        if len(ents) == 0:
            return _EMPTY
        if len(ents) == 1:
            return g.entity_neighbors(int(ents[0]))
        return np.concatenate([g.entity_neighbors(int(e)) for e in ents])

    def neighbor_counts(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        """Sorted transformed neighbors of `d` and the number of entities each shares with `d`."""
        reach = self._two_hop(d)
        if len(reach) == 0:
            return _EMPTY, _EMPTY
        nbrs, counts = np.unique(reach, return_counts=True)
        keep = nbrs != d
        return nbrs[keep], counts[keep]


def transformed_neighbors(t: TransformedView, d: int) -> np.ndarray:
    """Domains sharing at least one entity with `d` (excluding `d`), sorted."""
    reach = t._two_hop(d)
    if len(reach) == 0:
        return _EMPTY
    nbrs = np.unique(reach)
    return nbrs[nbrs != d]


def transformed_degree(t: TransformedView, d: int) -> int:
    reach = t._two_hop(d)
    if len(reach) == 0:
        return 0
    # a sorted copy is cheaper than np.unique's index bookkeeping
    s = np.sort(reach)
    distinct = 1 + int(np.count_nonzero(s[1:] != s[:-1]))
    return distinct - 1  # d itself is always reached through its own entities


def transformed_degrees(t: TransformedView) -> np.ndarray:
    """Transformed degree of every domain of the base graph."""
    return np.fromiter((transformed_degree(t, d) for d in range(t.base.n_domains)),
                       dtype=np.int64, count=t.base.n_domains)


def shared_entities(t: TransformedView, d1: int, d2: int) -> int:
    """Size of the intersection of two domains' entity sets (sorted merge)."""
    a, b = t._entities(d1), t._entities(d2)
    i = j = n = 0
    la, lb = len(a), len(b)
    while i < la and j < lb:
        if a[i] == b[j]:
            n += 1
            i += 1
            j += 1
        elif a[i] < b[j]:
            i += 1
        else:
            j += 1
    return n
