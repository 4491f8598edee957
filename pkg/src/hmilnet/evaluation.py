"""Leakage-safe K-fold denylist evaluation, the Grill hold-out, and ranking metrics.

In each fold the fold's denylisted domains are removed from the denylist
that features see; the model then scores the fold's domains and every
benign domain. A malicious domain therefore gets one score, a benign domain
gets K scores, and the benign score kept is their maximum.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .graph_store import Denylist, SnapshotCollection

# scorer(domain_ids, active_mask, watch_mask, fold) -> scores
Scorer = Callable[[np.ndarray, np.ndarray, np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignment: dict  # domain id -> fold index

    def fold(self, f: int) -> np.ndarray:
        return np.array(sorted(d for d, a in self.assignment.items() if a == f), dtype=np.int64)


@dataclass(frozen=True)
class EvalRecord:
    domain_id: int
    domain: str
    label: int
    score: float
    n_scores: int


@dataclass
class EvalResult:
    records: list
    k: int
    leak_count: int = 0
    fold_sizes: list = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records], dtype=np.float64)


def make_folds(positive_ids: Iterable[int], k: int, seed: int) -> FoldPlan:
    ids = np.array(sorted(set(int(i) for i in positive_ids)), dtype=np.int64)
    if k < 2:
        raise ValueError("K must be >= 2")
    if k > len(ids):
        raise ValueError(f"K={k} exceeds the {len(ids)} denylisted domains in the snapshot")
    perm = np.random.default_rng(seed).permutation(ids)
    return FoldPlan(k, seed, {int(d): i % k for i, d in enumerate(perm)})


def kfold_evaluate(scorer: Scorer, collection: SnapshotCollection, denylist: Denylist,
                   k: int = 5, seed: int = 0, positives: Iterable[str] | None = None) -> EvalResult:
    """Score every fold with that fold masked out of the active denylist.

    `positives` restricts the evaluated malicious domains (Grill test); other
    denylisted domains then stay in the active denylist and are not scored.
    """
    full = denylist.mask(collection.domains)
    if positives is None:
        pos_mask = full
    else:
        pos_mask = np.zeros_like(full)
        for name in positives:
            idx = collection.domains.get(name)
            if idx is not None and full[idx]:
                pos_mask[idx] = True
    plan = make_folds(np.flatnonzero(pos_mask), k, seed)
    benign = np.flatnonzero(~full)

    pos_score: dict[int, float] = {}
    benign_scores = np.full((k, len(benign)), -np.inf)
    leaks = 0
    sizes = []
    for f in range(k):
        fold = plan.fold(f)
        sizes.append(len(fold))
        active = full.copy()
        active[fold] = False
        watch = np.zeros_like(full)
        watch[fold] = True
        leaks += int(np.count_nonzero(active & watch))
        ids = np.concatenate([fold, benign])
        before = getattr(scorer, "leak_hits", 0)
        s = np.asarray(scorer(ids, active, watch, f), dtype=np.float64)
        leaks += getattr(scorer, "leak_hits", 0) - before
        for d, v in zip(fold.tolist(), s[:len(fold)].tolist()):
            pos_score[d] = v
        benign_scores[f] = s[len(fold):]

    records = []
    bmax = benign_scores.max(axis=0) if len(benign) else np.empty(0)
    names = collection.domains
    for d, v in pos_score.items():
        records.append(EvalRecord(d, names.name(d), 1, v, 1))
    for d, v in zip(benign.tolist(), bmax.tolist()):
        records.append(EvalRecord(d, names.name(d), 0, v, k))
    records.sort(key=lambda r: r.domain_id)
    return EvalResult(records, k, leaks, sizes)


# ---------------------------------------------------------------- Grill test


@dataclass(frozen=True)
class GrillPlan:
    heldout: frozenset
    fraction: float
    seed: int
    per_family: dict


def _largest_remainder(sizes: dict, fraction: float) -> dict:
    exact = {f: fraction * n for f, n in sizes.items()}
    quota = {f: int(math.floor(x)) for f, x in exact.items()}
    target = int(round(fraction * sum(sizes.values())))
    order = sorted(sizes, key=lambda f: (-(exact[f] - quota[f]), f))
    for f in order[:max(0, target - sum(quota.values()))]:
        quota[f] += 1
    return quota


def grill_split(denylist: Denylist, fraction: float, seed: int = 0) -> GrillPlan:
    """Hold out a family-proportional subset of the denylist.

    Quotas use largest-remainder rounding and never take a family's last
    member, so every family keeps at least one trainable positive.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    families: dict[str, list] = {}
    for dom, fam in denylist.entries.items():
        families.setdefault(fam, []).append(dom)
    sizes = {f: len(v) for f, v in families.items()}
    quota = _largest_remainder(sizes, fraction)
    rng = np.random.default_rng(seed)
    held = set()
    per_family = {}
    for fam in sorted(families):
        members = sorted(families[fam])
        q = min(quota[fam], len(members) - 1)
        chosen = rng.choice(len(members), size=q, replace=False) if q > 0 else []
        per_family[fam] = q
        held.update(members[i] for i in chosen)
    return GrillPlan(frozenset(held), fraction, seed, per_family)


# ---------------------------------------------------------------- metrics


@dataclass
class Metrics:
    ap: float
    auc: float
    pr: tuple   # (recall, precision)
    roc: tuple  # (fpr, tpr)


def _check_labels(labels: np.ndarray) -> tuple[int, int]:
    p = int(np.count_nonzero(labels == 1))
    n = int(np.count_nonzero(labels == 0))
    if p == 0 or n == 0:
        raise ValueError("ranking metrics need at least one positive and one negative")
    return p, n


def auc_score(labels, scores) -> float:
    """Area under ROC via the rank-sum statistic with mid-ranks for ties."""
    labels = np.asarray(labels)
    p, n = _check_labels(labels)
    ranks = rankdata(np.asarray(scores, dtype=np.float64), method="average")
    u = ranks[labels == 1].sum() - p * (p + 1) / 2.0
    return float(u / (p * n))


def _threshold_counts(labels, scores):
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    s = np.asarray(scores, dtype=np.float64)[order]
    y = np.asarray(labels)[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y == 1)[last]
    fp = np.cumsum(y == 0)[last]
    return tp, fp, s[last]


def average_precision(labels, scores) -> float:
    """Step-wise area under the PR curve, one step per distinct score."""
    labels = np.asarray(labels)
    p, _ = _check_labels(labels)
    tp, fp, _ = _threshold_counts(labels, scores)
    dtp = np.diff(np.r_[0, tp])
    prec = tp / (tp + fp)
    return math.fsum((dtp * prec).tolist()) / p


def ranking_metrics(labels, scores) -> Metrics:
    labels = np.asarray(labels)
    p, n = _check_labels(labels)
    tp, fp, _ = _threshold_counts(labels, scores)
    recall = tp / p
    precision = tp / (tp + fp)
    fpr = np.r_[0.0, fp / n]
    tpr = np.r_[0.0, tp / p]
    return Metrics(average_precision(labels, scores), auc_score(labels, scores),
                   (recall, precision), (fpr, tpr))


# ---------------------------------------------------------------- output


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_eval_outputs(out_dir: str | Path, result: EvalResult, metrics: Metrics) -> dict:
    """records.csv, pr.csv, roc.csv and summary.csv; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("records", "pr", "roc", "summary")}
    write_csv(paths["records"], ("domain", "label", "score"),
               ((r.domain, r.label, _fmt(r.score)) for r in result.records))
    write_csv(paths["pr"], ("recall", "precision"),
               ((_fmt(a), _fmt(b)) for a, b in zip(*metrics.pr)))
    write_csv(paths["roc"], ("fpr", "tpr"), ((_fmt(a), _fmt(b)) for a, b in zip(*metrics.roc)))
    write_csv(paths["summary"], ("AP", "AUC"), [(_fmt(metrics.ap), _fmt(metrics.auc))])
    return paths


def write_scores(path: str | Path, names: Sequence[str], scores: Sequence[float]) -> None:
    write_csv(Path(path), ("domain", "score"), ((n, _fmt(s)) for n, s in zip(names, scores)))
