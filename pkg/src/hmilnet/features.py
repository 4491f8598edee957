"""Vertex and edge features computed from raw interaction structure.

Unbounded counts are compressed with the natural log, ``x -> log(x + 1)``.
The Jaccard index and the denylist indicator are already bounded and are
passed through unchanged.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .graph_store import BipartiteGraph
from .transform import TransformedView, transformed_degree

VERTEX_FEATURES = ("degree", "transformed_degree")
EDGE_FEATURES = ("neighbor_degree", "intersection", "union", "jaccard", "attachment", "detected")


class VertexFeatures(NamedTuple):
    degree: float
    transformed_degree: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


class EdgeFeatures(NamedTuple):
    neighbor_degree: float
    intersection: float
    union: float
    jaccard: float
    attachment: float
    detected: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


def _is_active(active_denylist, u: int) -> bool:
    if active_denylist is None:
        return False
    if isinstance(active_denylist, np.ndarray):
        return bool(active_denylist[u])
    return u in active_denylist


def vertex_features(g: BipartiteGraph, t: TransformedView, d: int) -> VertexFeatures:
    deg = int(g.domain_degree[d]) if 0 <= d < g.n_domains else 0
    return VertexFeatures(float(np.log1p(deg)), float(np.log1p(transformed_degree(t, d))))


def edge_features(g: BipartiteGraph, d: int, u: int, active_denylist=None) -> EdgeFeatures:
    """Features of the projected edge {d, u}; `active_denylist` is a mask or id set."""
    nd, nu = g.domain_neighbors(d), g.domain_neighbors(u)
    inter = len(np.intersect1d(nd, nu, assume_unique=True))
    union = len(nd) + len(nu) - inter
    return EdgeFeatures(
        float(np.log1p(len(nu))),
        float(np.log1p(inter)),
        float(np.log1p(union)),
        inter / union,
        float(np.log1p(len(nd) * len(nu))),
        1.0 if _is_active(active_denylist, u) else 0.0,
    )


def edge_feature_matrix(deg_d: int, deg_u: np.ndarray, inter: np.ndarray,
                        detected: np.ndarray) -> np.ndarray:
    """Row-wise edge features for many neighbors of one vertex at once."""
    deg_u = np.asarray(deg_u, dtype=np.float64)
    inter = np.asarray(inter, dtype=np.float64)
    union = deg_d + deg_u - inter
    out = np.empty((len(deg_u), len(EDGE_FEATURES)), dtype=np.float64)
    out[:, 0] = np.log1p(deg_u)
    out[:, 1] = np.log1p(inter)
    out[:, 2] = np.log1p(union)
    out[:, 3] = inter / union
    out[:, 4] = np.log1p(deg_d * deg_u)
    out[:, 5] = detected
    return out
