"""Probabilistic Threat Propagation on one projected relation graph.

Threat of a vertex is the weighted average of its neighbors' threat, where
each neighbor's value is taken *conditioned on the vertex itself being
benign*. That conditioning removes direct echo: the value a neighbor j
passes to i must not contain what i previously sent to j.

Both solvers work on directed edge messages ``x[i<-j] = P(j | i = 0)``:

* ``ptp_exact`` solves the linear system
  ``x[i<-j] = sum_{k in N(j), k != i} w_jk x[j<-k]`` (denylisted j pinned to 1),
* ``ptp_iterative`` runs the synchronous update
  ``P_t(i) = sum_j w_ij (P_{t-1}(j) - C_{t-1}(i, j))`` where the correction
  ``C_{t-1}(i, j) = w_ji (P_{t-2}(i) - C_{t-2}(j, i))`` is the message i sent
  to j in the previous step (zero when j is denylisted, whose value is
  pinned rather than propagated). This is Jacobi iteration on the same
  system, so it converges to the exact solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .graph_store import BipartiteGraph

UNIFORM = "uniform"
SHARED = "shared"
DEFAULT_EDGE_BUDGET = 20_000_000
DEFAULT_SOLVER_LIMIT = 2000


class EdgeBudgetExceeded(RuntimeError):
    pass


class SingularSystem(RuntimeError):
    pass


@dataclass
class PtpGraph:
    n: int
    src: np.ndarray      # directed edge i -> j stored once per direction, sorted by (src, dst)
    dst: np.ndarray
    weight: np.ndarray   # w_ij, rows normalized to one
    rev: np.ndarray      # index of the reverse edge j -> i
    denylisted: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.src) // 2

    def degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n)

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.src, weights=self.weight, minlength=self.n)


@dataclass
class PtpResult:
    scores: np.ndarray
    iterations: int
    deltas: list = field(default_factory=list)


def ptp_graph_from_edges(n: int, edges, weights=None, denylisted=None) -> PtpGraph:
    """PtpGraph from an undirected weighted edge list (weights are symmetric before normalization)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("edge weights must be positive")
    loop = edges[:, 0] == edges[:, 1]
    edges, w = edges[~loop], w[~loop]
    mat = sp.coo_matrix((np.concatenate([w, w]),
                         (np.concatenate([edges[:, 0], edges[:, 1]]),
                          np.concatenate([edges[:, 1], edges[:, 0]]))), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    den = np.zeros(n, bool) if denylisted is None else np.asarray(denylisted, bool)
    return _from_symmetric(mat, den)


def _from_symmetric(mat: sp.csr_matrix, denylisted: np.ndarray) -> PtpGraph:
    mat = mat.tocsr()
    mat.sort_indices()
    n = mat.shape[0]
    src = np.repeat(np.arange(n, dtype=np.int64), np.diff(mat.indptr))
    dst = mat.indices.astype(np.int64)
    raw = mat.data.astype(np.float64)
    rowsum = np.bincount(src, weights=raw, minlength=n)
    weight = raw / rowsum[src]
    keys = src * n + dst
    rev = np.searchsorted(keys, dst * n + src)
    return PtpGraph(n, src, dst, weight, rev, np.asarray(denylisted, bool).copy())


def build_ptp_graph(g: BipartiteGraph, denylisted: np.ndarray, weighting: str = SHARED,
                    degree_cap: int | None = None,
                    edge_budget: int = DEFAULT_EDGE_BUDGET) -> PtpGraph:
    """Materialize the domain projection of `g` with shared-entity or uniform weights."""
    if weighting not in (SHARED, UNIFORM):
        raise ValueError(f"weighting must be {SHARED!r} or {UNIFORM!r}")
    deg = g.entity_degree.astype(np.int64)
    keep_ent = np.ones(g.n_entities, bool) if degree_cap is None else deg <= degree_cap
    pairs = int((deg[keep_ent] * (deg[keep_ent] - 1)).sum()) // 2
    if pairs > edge_budget:
        raise EdgeBudgetExceeded(
            f"projection of {g.relation!r} may have up to {pairs} edges (budget {edge_budget}); "
            f"set an entity degree cap")
    rows, cols = g.edges()
    sel = keep_ent[cols]
    a = sp.csr_matrix((np.ones(int(sel.sum())), (rows[sel], cols[sel])),
                      shape=(g.n_domains, g.n_entities))
    shared = (a @ a.T).tocsr()
    shared = (shared - sp.diags(shared.diagonal())).tocsr()
    shared.eliminate_zeros()
    if weighting == UNIFORM:
        shared.data[:] = 1.0
    return _from_symmetric(shared, denylisted)


def ptp_iterative(graph: PtpGraph, iterations: int = 20) -> PtpResult:
    den = graph.denylisted
    p0 = den.astype(np.float64)
    p = p0.copy()
    w = graph.weight
    w_rev = w[graph.rev]
    q = np.zeros(len(graph.src))
    deltas = []
    for _ in range(iterations):
        c = np.where(den[graph.dst], 0.0, w_rev * q[graph.rev])
        q = p[graph.dst] - c
        new = np.bincount(graph.src, weights=w * q, minlength=graph.n)
        new[den] = 1.0
        deltas.append(float(np.max(np.abs(new - p), initial=0.0)))
        p = new
    return PtpResult(np.clip(p, 0.0, 1.0), iterations, deltas)


def ptp_exact(graph: PtpGraph, solver_limit: int = DEFAULT_SOLVER_LIMIT) -> PtpResult:
    if graph.n > solver_limit:
        raise ValueError(f"exact PTP limited to {solver_limit} vertices, graph has {graph.n}")
    den = graph.denylisted
    src, dst, w, rev = graph.src, graph.dst, graph.weight, graph.rev
    m = len(src)
    indptr = np.zeros(graph.n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=graph.n), out=indptr[1:])

    # unknown x_e for edge e = (i -> j) with j not denylisted
    unknown = ~den[dst]
    rows, cols, vals = [], [], []
    b = np.zeros(m)
    for j in range(graph.n):
        if den[j]:
            continue
        out_e = np.arange(indptr[j], indptr[j + 1])
        if len(out_e) == 0:
            continue
        in_e = rev[out_e]  # edges (i -> j)
        for e in in_e:
            others = out_e[out_e != rev[e]]
            ks = dst[others]
            pinned = den[ks]
            b[e] = w[others[pinned]].sum()
            free = others[~pinned]
            rows.append(np.full(len(free), e))
            cols.append(free)
            vals.append(w[free])
    idx = np.flatnonzero(unknown)
    pos = -np.ones(m, dtype=np.int64)
    pos[idx] = np.arange(len(idx))
    if rows:
        r = pos[np.concatenate(rows)]
        c = pos[np.concatenate(cols)]
        v = np.concatenate(vals)
    else:
        r = c = np.empty(0, np.int64)
        v = np.empty(0)
    n_u = len(idx)
    x = np.ones(m)
    if n_u:
        mat = sp.identity(n_u, format="csr") - sp.csr_matrix((v, (r, c)), shape=(n_u, n_u))
        try:
            sol = spla.spsolve(mat.tocsc(), b[idx])
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from None
        sol = np.atleast_1d(sol)
        if not np.all(np.isfinite(sol)):
            bad = idx[~np.isfinite(sol)]
            comp = sorted(set(src[bad].tolist()) | set(dst[bad].tolist()))
            raise SingularSystem(f"singular PTP system on component {comp[:20]}")
        x[idx] = sol
    p = np.bincount(src, weights=w * x, minlength=graph.n)
    p[den] = 1.0
    return PtpResult(np.clip(p, 0.0, 1.0), 0)


class PtpScorer:
    """Scorer for kfold_evaluate: PTP seeded with the fold's active denylist."""

    def __init__(self, g: BipartiteGraph, iterations: int = 20, weighting: str = SHARED,
                 degree_cap: int | None = None, edge_budget: int = DEFAULT_EDGE_BUDGET):
        self.graph = build_ptp_graph(g, np.zeros(g.n_domains, bool), weighting, degree_cap,
                                     edge_budget)
        self.iterations = iterations

    def __call__(self, ids: np.ndarray, active: np.ndarray, watch=None, fold: int = 0) -> np.ndarray:
        self.graph.denylisted = np.asarray(active, bool).copy()
        return ptp_iterative(self.graph, self.iterations).scores[ids]
