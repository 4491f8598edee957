"""Hierarchical multiple-instance samples and their construction from graphs.

A sample is built recursively from three node kinds:

* ``Leaf``: a feature vector,
* ``Bag``: an unordered, possibly empty collection of samples sharing one
  schema, with a positive importance weight per instance,
* ``Product``: a fixed-length tuple of samples of arbitrary schemas,

plus the ``MISSING`` marker for an absent tuple item. Bags whose instances
are leaves may store them as a single matrix, which keeps the per-instance
object count out of the hot path.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .features import EDGE_FEATURES, VERTEX_FEATURES, edge_feature_matrix
from .graph_store import SnapshotCollection
from .sampling import DEFAULT_K_MINUS, bag_rng, sample_indices
from .transform import TransformedView, transformed_degrees

# ---------------------------------------------------------------- schemas


@dataclass(frozen=True)
class LeafSchema:
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("leaf dim must be >= 1")


@dataclass(frozen=True)
class BagSchema:
    child: "Schema"


@dataclass(frozen=True)
class ProductSchema:
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise ValueError("product schema must be non-empty")


Schema = Union[LeafSchema, BagSchema, ProductSchema]

# ---------------------------------------------------------------- samples


class _Missing:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "MISSING"


MISSING = _Missing()


class Leaf:
    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64).reshape(-1)

    def __repr__(self):
        return f"Leaf({np.array2string(self.data, precision=4)})"


class Bag:
    """Instances plus importance weights (default 1)."""

    __slots__ = ("_children", "matrix", "weights")

    def __init__(self, children: Sequence = (), weights=None):
        self._children = list(children)
        self.matrix = None
        n = len(self._children)
        self.weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        if len(self.weights) != n:
            raise ValueError("one weight per instance required")

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, weights=None) -> "Bag":
        """Bag of leaf instances given as rows of `matrix`."""
        bag = cls.__new__(cls)
        bag._children = None
        bag.matrix = np.asarray(matrix, dtype=np.float64)
        n = len(bag.matrix)
        bag.weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        if len(bag.weights) != n:
            raise ValueError("one weight per instance required")
        return bag

    @property
    def children(self) -> list:
        if self._children is None:
            return [Leaf(row) for row in self.matrix]
        return self._children

    def __len__(self) -> int:
        return len(self.weights)


class Product:
    __slots__ = ("children",)

    def __init__(self, children: Sequence):
        self.children = list(children)


# ---------------------------------------------------------------- checking


class SchemaMismatch(ValueError):
    pass


def _mismatch(sample, schema, path: str) -> str | None:
    if sample is MISSING:
        return None
    if isinstance(schema, LeafSchema):
        if not isinstance(sample, Leaf):
            return f"{path}: expected leaf, got {type(sample).__name__}"
        if len(sample.data) != schema.dim:
            return f"{path}: dim {len(sample.data)} != {schema.dim}"
        if not np.all(np.isfinite(sample.data)):
            return f"{path}: non-finite leaf value"
        return None
    if isinstance(schema, BagSchema):
        if not isinstance(sample, Bag):
            return f"{path}: expected bag, got {type(sample).__name__}"
        if np.any(sample.weights <= 0):
            return f"{path}: non-positive instance weight"
        if sample.matrix is not None:
            child = schema.child
            if not isinstance(child, LeafSchema):
                return f"{path}.bag.child: expected {type(child).__name__}, got leaf matrix"
            if len(sample.matrix) and sample.matrix.shape[1] != child.dim:
                return f"{path}.bag.child: dim {sample.matrix.shape[1]} != {child.dim}"
            return None
        for i, c in enumerate(sample.children):
            msg = _mismatch(c, schema.child, f"{path}.bag[{i}]")
            if msg:
                return msg
        return None
    if isinstance(schema, ProductSchema):
        if not isinstance(sample, Product):
            return f"{path}: expected tuple, got {type(sample).__name__}"
        if len(sample.children) != len(schema.children):
            return f"{path}: tuple of {len(sample.children)} != {len(schema.children)}"
        for i, (c, s) in enumerate(zip(sample.children, schema.children)):
            msg = _mismatch(c, s, f"{path}.tuple[{i}]")
            if msg:
                return msg
        return None
    raise TypeError(f"not a schema: {schema!r}")


def check_schema(sample, schema: Schema) -> str | None:
    """None if `sample` conforms to `schema`, else the first mismatch path."""
    return _mismatch(sample, schema, "root")


def assert_schema(sample, schema: Schema) -> None:
    msg = check_schema(sample, schema)
    if msg:
        raise SchemaMismatch(msg)


def random_sample(schema: Schema, rng: np.random.Generator, max_bag: int = 3,
                  p_missing: float = 0.0):
    """Draw an arbitrary sample of `schema`; used by tests and gradient checks."""
    if p_missing and rng.random() < p_missing:
        return MISSING
    if isinstance(schema, LeafSchema):
        return Leaf(rng.normal(size=schema.dim))
    if isinstance(schema, BagSchema):
        k = int(rng.integers(0, max_bag + 1))
        kids = [random_sample(schema.child, rng, max_bag) for _ in range(k)]
        return Bag(kids, rng.uniform(0.5, 2.0, size=k))
    return Product([random_sample(s, rng, max_bag, p_missing) for s in schema.children])


def dump(sample, indent: int = 0) -> str:
    """Indented text tree of a sample, for debugging only."""
    pad = "  " * indent
    if sample is MISSING:
        return f"{pad}missing"
    if isinstance(sample, Leaf):
        return f"{pad}leaf {np.array2string(sample.data, precision=3, separator=', ')}"
    if isinstance(sample, Bag):
        lines = [f"{pad}bag ({len(sample)} instances)"]
        for w, c in zip(sample.weights, sample.children):
            lines.append(f"{pad}  w={w:g}")
            lines.append(dump(c, indent + 2))
        return "\n".join(lines)
    lines = [f"{pad}tuple"]
    lines += [dump(c, indent + 1) for c in sample.children]
    return "\n".join(lines)


# ---------------------------------------------------------------- graph samples


def level_schema(steps: int) -> ProductSchema:
    """Schema of a vertex that still expands `steps` levels down."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        inst: Schema = LeafSchema(len(EDGE_FEATURES))
    else:
        inst = ProductSchema((level_schema(steps - 1), LeafSchema(len(EDGE_FEATURES))))
    return ProductSchema((LeafSchema(len(VERTEX_FEATURES)), BagSchema(inst)))


def graph_schema(n_relations: int, steps: int = 1) -> ProductSchema:
    return ProductSchema(tuple(level_schema(steps) for _ in range(n_relations)))


class SampleBuilder:
    """Builds per-domain HMIL samples from one snapshot.

    Transformed neighborhoods and shared-entity counts are cached per
    (relation, domain); everything else (importance sampling, ``detected``)
    depends on the active denylist passed per call.
    """

    def __init__(self, collection: SnapshotCollection, relations: Sequence[str] | None = None,
                 steps: int = 1, k_minus: int = DEFAULT_K_MINUS, seed: int = 0,
                 entity_degree_cap: int | None = None):
        if steps < 1:
            raise ValueError("steps must be >= 1")
        self.collection = collection
        self.relations = list(relations) if relations is not None else collection.relations
        self.steps = steps
        self.k_minus = k_minus
        self.seed = seed
        self.views = {r: TransformedView(g, entity_degree_cap)
                      for r, g in collection.graphs.items() if r in self.relations}
        self._tdeg: dict[str, np.ndarray] = {}
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self.schema = graph_schema(len(self.relations), steps)
        # instrumentation: detected==1 hits on watched domains
        self.watch: np.ndarray | None = None
        self.watch_hits = 0
        self._lock = threading.Lock()

    def _tdegrees(self, rel: str) -> np.ndarray:
        td = self._tdeg.get(rel)
        if td is None:
            td = transformed_degrees(self.views[rel])
            self._tdeg[rel] = td
        return td

    def neighborhood(self, rel_idx: int, d: int) -> tuple[np.ndarray, np.ndarray]:
        key = (rel_idx, d)
        hit = self._cache.get(key)
        if hit is None:
            hit = self.views[self.relations[rel_idx]].neighbor_counts(d)
            self._cache[key] = hit
        return hit

    def _vertex_leaf(self, rel: str, d: int) -> np.ndarray:
        g = self.collection.graphs[rel]
        return np.array([np.log1p(g.domain_degree[d]), np.log1p(self._tdegrees(rel)[d])])

    def _node(self, rel_idx: int, u: int, steps: int, allowed, active: np.ndarray,
              key: tuple, dist: dict | None = None) -> Product:
        rel = self.relations[rel_idx]
        g = self.collection.graphs[rel]
        nbrs, inter = self.neighborhood(rel_idx, u)
        if allowed is not None and len(nbrs):
            sel = allowed(nbrs)
            nbrs, inter = nbrs[sel], inter[sel]
        det = active[nbrs]
        rng = bag_rng(self.seed, *key, rel_idx, u)
        keep, w = sample_indices(det, self.k_minus, rng)
        nbrs, inter, det = nbrs[keep], inter[keep], det[keep]
        if self.watch is not None and len(nbrs):
            hits = int(np.count_nonzero(det & self.watch[nbrs]))
            with self._lock:
                self.watch_hits += hits
        edges = edge_feature_matrix(int(g.domain_degree[u]), g.domain_degree[nbrs], inter,
                                    det.astype(np.float64))
        if steps == 1:
            bag = Bag.from_matrix(edges, w)
        else:
            kids = [Product([self._child(rel_idx, int(w_id), steps - 1, active, key, dist), Leaf(e)])
                    for w_id, e in zip(nbrs, edges)]
            bag = Bag(kids, w)
        return Product([Leaf(self._vertex_leaf(rel, u)), bag])

    def _child(self, rel_idx, w_id, steps, active, key, dist):
        level = dist[w_id]
        return self._node(rel_idx, w_id, steps,
                          lambda ids: np.fromiter((dist.get(int(i), -1) == level + 1 for i in ids),
                                                  bool, len(ids)),
                          active, key, dist)

    def _bfs(self, rel_idx: int, d: int) -> dict[int, int]:
        dist = {d: 0}
        frontier = [d]
        for t in range(1, self.steps + 1):
            nxt = []
            for u in frontier:
                for w in self.neighborhood(rel_idx, u)[0].tolist():
                    if w not in dist:
                        dist[w] = t
                        nxt.append(w)
            frontier = nxt
        return dist

    def build(self, d: int, active: np.ndarray, step: int = 0) -> Product:
        """Tuple over relations of the streamlined `steps`-neighborhood samples of `d`."""
        if not 0 <= d < len(self.collection.domains):
            raise KeyError(f"unknown domain id {d}")
        parts = []
        for ri, rel in enumerate(self.relations):
            if rel not in self.views:
                parts.append(MISSING)
                continue
            key = (d, step)
            if self.steps == 1:
                parts.append(self._node(ri, d, 1, None, active, key))
            else:
                dist = self._bfs(ri, d)
                parts.append(self._node(
                    ri, d, self.steps,
                    lambda ids: np.fromiter((dist.get(int(i), -1) == 1 for i in ids), bool, len(ids)),
                    active, key, dist))
        return Product(parts)


def build_graph_sample(collection: SnapshotCollection, d: int, steps: int, active: np.ndarray,
                       relations: Sequence[str] | None = None, k_minus: int = DEFAULT_K_MINUS,
                       seed: int = 0, step: int = 0) -> Product:
    """One-off sample construction; use SampleBuilder for repeated calls."""
    return SampleBuilder(collection, relations, steps, k_minus, seed).build(d, active, step)
