import csv
import math
from fractions import Fraction

import numpy as np
import pytest

from hmilnet.evaluation import (auc_score, average_precision, grill_split, kfold_evaluate,
                                make_folds, ranking_metrics, write_eval_outputs)
from hmilnet.graph_store import Denylist
from hmilnet.hmil import SampleBuilder

from conftest import make_collection


def brute_auc(labels, scores):
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_ap(labels, scores):
    """Sum over distinct thresholds of (new positives) * precision, divided by #positives."""
    n_pos = sum(labels)
    terms = []
    for t in sorted(set(scores), reverse=True):
        at = [y for y, s in zip(labels, scores) if s == t]
        above = [y for y, s in zip(labels, scores) if s >= t]
        terms.append(sum(at) * (sum(above) / len(above)))
    return math.fsum(terms) / n_pos


def exact_ap(labels, scores):
    n_pos = sum(labels)
    total = Fraction(0)
    for t in sorted(set(scores), reverse=True):
        at = sum(y for y, s in zip(labels, scores) if s == t)
        above = [y for y, s in zip(labels, scores) if s >= t]
        total += Fraction(at) * Fraction(sum(above), len(above))
    return float(total / n_pos)


def test_perfect_and_tied():
    m = ranking_metrics([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1])
    assert m.ap == 1.0 and m.auc == 1.0
    assert auc_score([1, 0], [0.9, 0.9]) == 0.5


def test_single_class_rejected():
    with pytest.raises(ValueError):
        ranking_metrics([1, 1], [0.1, 0.2])
    with pytest.raises(ValueError):
        auc_score([0, 0], [0.1, 0.2])


def test_against_brute_force(rng):
    for _ in range(10):
        n = int(rng.integers(2, 120))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), 1)  # plenty of ties
        assert auc_score(labels, scores) == brute_auc(labels.tolist(), scores.tolist())
        assert average_precision(labels, scores) == brute_ap(labels.tolist(), scores.tolist())
        assert average_precision(labels, scores) == pytest.approx(
            exact_ap(labels.tolist(), scores.tolist()), abs=1e-12)


def test_auc_invariant_under_monotone_maps(rng):
    labels = rng.integers(0, 2, size=80)
    labels[:2] = [0, 1]
    s = rng.normal(size=80)
    base = auc_score(labels, s)
    assert auc_score(labels, np.exp(s)) == base
    assert auc_score(labels, 3.0 * s + 7.0) == base


def test_curve_points_per_distinct_threshold():
    m = ranking_metrics([1, 0, 1, 0], [0.9, 0.5, 0.5, 0.1])
    recall, precision = m.pr
    assert recall.tolist() == [0.5, 1.0, 1.0]
    assert precision.tolist() == [1.0, 2 / 3, 0.5]
    fpr, tpr = m.roc
    assert fpr.tolist() == [0.0, 0.0, 0.5, 1.0]
    assert tpr.tolist() == [0.0, 0.5, 1.0, 1.0]


def test_folds_partition():
    plan = make_folds(range(23), 5, seed=1)
    folds = [set(plan.fold(f).tolist()) for f in range(5)]
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    assert set().union(*folds) == set(range(23))
    assert sum(sizes) == 23
    with pytest.raises(ValueError):
        make_folds(range(3), 4, 0)
    with pytest.raises(ValueError):
        make_folds(range(3), 1, 0)


class Recorder:
    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.calls = []

    def __call__(self, ids, active, watch, fold):
        s = self.rng.random(len(ids))
        self.calls.append((ids.copy(), active.copy(), s))
        return s


def _fixture(n_pos=4, n_neg=6):
    edges = [(f"m{i}", "e") for i in range(n_pos)] + [(f"b{i}", f"x{i}") for i in range(n_neg)]
    coll = make_collection({"r": ("m2m", edges)})
    dl = Denylist({f"m{i}": "fam" for i in range(n_pos)})
    return coll, dl


def test_protocol_counts_k2():
    coll, dl = _fixture()
    rec = Recorder()
    res = kfold_evaluate(rec, coll, dl, k=2, seed=0)
    assert len(rec.calls) == 2
    pos = [r for r in res.records if r.label == 1]
    neg = [r for r in res.records if r.label == 0]
    assert len(pos) == 4 and all(r.n_scores == 1 for r in pos)
    assert len(neg) == 6 and all(r.n_scores == 2 for r in neg)
    for r in neg:
        seen = [s[list(ids).index(r.domain_id)] for ids, _, s in rec.calls]
        assert len(seen) == 2 and r.score == max(seen)
    for ids, active, _ in rec.calls:
        fold = [d for d in ids if dl.mask(coll.domains)[d]]
        assert not active[fold].any()
    assert [r.domain_id for r in res.records] == sorted(r.domain_id for r in res.records)
    assert res.leak_count == 0
    with pytest.raises(ValueError):
        kfold_evaluate(rec, coll, dl, k=5, seed=0)


class DetectedCount:
    """Scores a domain by the number of detected transformed neighbors."""

    def __init__(self, coll, ignore_mask=None):
        self.builder = SampleBuilder(coll, k_minus=10_000)
        self.ignore_mask = ignore_mask

    @property
    def leak_hits(self):
        return self.builder.watch_hits

    def __call__(self, ids, active, watch, fold):
        self.builder.watch = watch
        use = active if self.ignore_mask is None else self.ignore_mask
        out = [sum(p.children[1].matrix[:, 5].sum() for p in self.builder.build(int(d), use).children)
               for d in ids]
        return np.array(out, dtype=float)


def test_fold_masking_lowers_scores_on_clique(clique_snapshot):
    coll = clique_snapshot.collection
    # one planted clique, so every fold holds at least one clique-mate of each scored domain
    dl = Denylist({f"bad{i}": "fam1" for i in range(5)})
    masked = kfold_evaluate(DetectedCount(coll), coll, dl, k=2, seed=0)
    leaky = DetectedCount(coll, ignore_mask=dl.mask(coll.domains))
    unmasked = kfold_evaluate(leaky, coll, dl, k=2, seed=0)
    assert masked.leak_count == 0
    assert unmasked.leak_count > 0  # the instrumentation catches a scorer that ignores folds
    m = {r.domain: r.score for r in masked.records if r.label == 1}
    u = {r.domain: r.score for r in unmasked.records if r.label == 1}
    assert all(m[d] < u[d] for d in m)


def test_positive_subset_for_grill(clique_snapshot):
    coll, dl = clique_snapshot.collection, clique_snapshot.denylist
    rec = Recorder()
    res = kfold_evaluate(rec, coll, dl, k=2, seed=0, positives=["bad0", "evil1", "nonexistent"])
    pos = sorted(r.domain for r in res.records if r.label == 1)
    assert pos == ["bad0", "evil1"]
    # other denylisted domains are neither scored nor counted as benign
    assert not any(r.domain in dl and r.label == 0 for r in res.records)
    for _, active, _ in rec.calls:
        assert active[coll.domains.index("bad1")]


def test_grill_largest_remainder():
    dl = Denylist({**{f"a{i}": "A" for i in range(10)}, **{f"b{i}": "B" for i in range(5)}})
    plan = grill_split(dl, 0.2, seed=0)
    assert plan.per_family == {"A": 2, "B": 1}
    assert len(plan.heldout) == 3
    assert sum(1 for d in plan.heldout if d.startswith("a")) == 2
    assert grill_split(dl, 0.2, seed=0) == plan


def test_grill_keeps_one_per_family():
    dl = Denylist({**{f"a{i}": "A" for i in range(10)}, **{f"b{i}": "B" for i in range(5)},
                   "c0": "C"})
    plan = grill_split(dl, 0.99, seed=3)
    assert plan.per_family == {"A": 9, "B": 4, "C": 0}
    for fam in "abc":
        assert any(d.startswith(fam) and d not in plan.heldout for d in dl)


def test_grill_fraction_bounds():
    dl = Denylist({"a": "A"})
    for f in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            grill_split(dl, f)


def test_csv_outputs(tmp_path):
    coll, dl = _fixture()
    res = kfold_evaluate(Recorder(), coll, dl, k=2, seed=0)
    m = ranking_metrics(res.labels, res.scores)
    paths = write_eval_outputs(tmp_path, res, m)
    rows = list(csv.reader(paths["records"].open()))
    assert rows[0] == ["domain", "label", "score"] and len(rows) == 11
    assert [r[0] for r in rows[1:]] == [coll.domains.name(i) for i in range(10)]
    summ = list(csv.reader(paths["summary"].open()))
    assert summ[0] == ["AP", "AUC"] and float(summ[1][1]) == m.auc
    assert next(csv.reader(paths["pr"].open())) == ["recall", "precision"]
    assert next(csv.reader(paths["roc"].open())) == ["fpr", "tpr"]
