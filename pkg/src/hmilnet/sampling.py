"""Importance subsampling of large neighborhoods.

All denylisted neighbors are kept with weight 1. Unknown neighbors beyond
``k_minus`` are subsampled uniformly without replacement and reweighted by
``n_minus / k_minus`` so that weighted aggregations stay unbiased.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_K_MINUS = 100


@dataclass(frozen=True)
class WeightedInstanceSet:
    instances: np.ndarray  # neighbor domain ids, sorted ascending
    weights: np.ndarray
    n_plus: int
    n_minus: int

    def __len__(self) -> int:
        return len(self.instances)


def bag_rng(seed: int, *key: int) -> np.random.Generator:
    """Child generator keyed by run seed and e.g. (vertex, relation, step).

    Keys go through SeedSequence hashing, so the stream for a bag does not
    depend on which worker builds it or in what order.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *map(int, key)]))


def sample_bag(neighbors: np.ndarray, active_denylist, k_minus: int = DEFAULT_K_MINUS,
               rng_seed: int | np.random.Generator | None = 0) -> WeightedInstanceSet:
    """Keep every positive, at most `k_minus` negatives, and attach weights.

    `active_denylist` is a boolean mask over domain ids (or a set of ids).
    """
    if k_minus < 1:
        raise ValueError("k_minus must be >= 1")
    neighbors = np.asarray(neighbors, dtype=np.int64)
    if len(neighbors) == 0:
        return WeightedInstanceSet(neighbors, np.empty(0), 0, 0)
    if isinstance(active_denylist, np.ndarray):
        pos_mask = active_denylist[neighbors]
    else:
        pos_mask = np.fromiter((int(u) in active_denylist for u in neighbors), bool, len(neighbors))
    pos = neighbors[pos_mask]
    neg = neighbors[~pos_mask]
    n_plus, n_minus = len(pos), len(neg)

    if n_minus > k_minus:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        neg = neg[rng.choice(n_minus, size=k_minus, replace=False)]
        w_minus = n_minus / k_minus
    else:
        w_minus = 1.0

    ids = np.concatenate([pos, neg])
    w = np.concatenate([np.ones(n_plus), np.full(len(neg), w_minus)])
    order = np.argsort(ids, kind="stable")
    return WeightedInstanceSet(ids[order], w[order], n_plus, n_minus)


def sample_indices(is_positive: np.ndarray, k_minus: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Index-level variant used by the sample builder: (kept positions, weights)."""
    n = len(is_positive)
    n_minus = n - int(np.count_nonzero(is_positive))
    if n_minus <= k_minus:
        return np.arange(n), np.ones(n)
    pos_idx = np.flatnonzero(is_positive)
    neg_idx = np.flatnonzero(~is_positive)
    chosen = neg_idx[rng.choice(n_minus, size=k_minus, replace=False)]
    keep = np.concatenate([pos_idx, chosen])
    w = np.concatenate([np.ones(len(pos_idx)), np.full(k_minus, n_minus / k_minus)])
    order = np.argsort(keep, kind="stable")
    return keep[order], w[order]
