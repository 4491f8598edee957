"""Balanced minibatch training and HMIL scoring of snapshots."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from .evaluation import write_csv
from .graph_store import Snapshot, SnapshotCollection
from .hmil import SampleBuilder
from .model import HmilModel, builtin_arch

log = logging.getLogger(__name__)

# sample-randomness key offset for scoring, disjoint from training batch indices
EVAL_KEY = 1 << 40


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    minibatch_size: int = 256
    minibatches_per_graph: int = 1000
    epochs: int = 5
    omega0: float = 0.9
    omega1: float = 0.1
    k_minus: int = 100
    seed: int = 0
    arch: str = "Mb"
    steps: int = 1
    lr: float = 1e-3
    entity_degree_cap: int | None = None
    threads: int = 1

    def validate(self) -> None:
        if self.minibatch_size < 2 or self.minibatch_size % 2:
            raise ValueError("minibatch_size must be even and >= 2")
        if self.minibatches_per_graph < 1 or self.epochs < 0:
            raise ValueError("minibatches_per_graph must be >= 1 and epochs >= 0")
        if self.k_minus < 1 or self.steps < 1 or self.threads < 1:
            raise ValueError("k_minus, steps and threads must be >= 1")

    @classmethod
    def from_settings(cls, s: Mapping[str, object], threads: int = 1) -> "TrainConfig":
        cap = int(s["sampling.entity_degree_cap"])
        return cls(minibatch_size=int(s["train.minibatch_size"]),
                   minibatches_per_graph=int(s["train.minibatches_per_graph"]),
                   epochs=int(s["train.epochs"]), omega0=float(s["train.omega0"]),
                   omega1=float(s["train.omega1"]), k_minus=int(s["sampling.k_minus"]),
                   seed=int(s["seed"]), arch=str(s["model.arch"]), steps=int(s["model.steps"]),
                   lr=float(s["train.lr"]), entity_degree_cap=cap or None, threads=threads)

    def to_dict(self) -> dict:
        return asdict(self)


def build_minibatch(pos_pool: np.ndarray, neg_pool: np.ndarray, size: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """size/2 positives and size/2 negatives, unique within the batch when the pools allow."""
    half = size // 2
    if len(pos_pool) == 0:
        raise TrainingError("empty positive pool: no denylisted domain is present in the "
                            "training snapshot (check denylist.tsv and the Grill hold-out)")
    if len(neg_pool) == 0:
        raise TrainingError("empty negative pool: every domain of the snapshot is denylisted")
    parts = []
    for pool in (pos_pool, neg_pool):
        parts.append(pool[rng.choice(len(pool), size=half, replace=len(pool) < half)])
    ids = np.concatenate(parts)
    labels = np.r_[np.ones(half, np.int64), np.zeros(half, np.int64)]
    return ids, labels


def _build(builder: SampleBuilder, ids: Sequence[int], active: np.ndarray, step: int,
           threads: int) -> list:
    if threads <= 1 or len(ids) < 2 * threads:
        return [builder.build(int(d), active, step) for d in ids]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(lambda d: builder.build(int(d), active, step), ids))


@dataclass
class TrainResult:
    model: HmilModel
    losses: list = field(default_factory=list)
    heldout_positive_hits: int = 0
    heldout_central_hits: int = 0


def train(snapshots: Sequence[Snapshot], config: TrainConfig, heldout: Iterable[str] = (),
          relations: Sequence[str] | None = None) -> TrainResult:
    """Train a fresh model: per epoch, per snapshot in input order, a block of minibatches.

    `heldout` domains (Grill test) are never central vertices and count as
    not denylisted in every feature computed during training.
    """
    config.validate()
    if not snapshots:
        raise TrainingError("at least one training snapshot is required")
    if relations is None:
        relations = sorted({r for s in snapshots for r in s.collection.relations})
    arch = builtin_arch(config.arch, len(relations), config.steps)
    model = HmilModel.create(arch, relations, seed=config.seed)
    result = TrainResult(model)
    if config.epochs == 0:
        return result

    held = set(heldout)
    plans = []
    for s in snapshots:
        coll = s.collection
        active = s.denylist.without(held).mask(coll.domains)
        pos_pool = np.flatnonzero(active)
        neg_pool = np.flatnonzero(~s.denylist.mask(coll.domains))
        half = config.minibatch_size // 2
        if 0 < len(pos_pool) < half:
            log.warning("%s: only %d positives for %d slots per batch; positives repeat within "
                        "a batch", coll.snapshot_label, len(pos_pool), half)
        held_mask = np.zeros(len(coll.domains), bool)
        for name in held:
            idx = coll.domains.get(name)
            if idx is not None:
                held_mask[idx] = True
        builder = SampleBuilder(coll, relations, config.steps, config.k_minus, config.seed,
                                config.entity_degree_cap)
        # instrumentation: a held-out domain must never show up as a detected neighbor
        builder.watch = held_mask
        plans.append((coll, active, pos_pool, neg_pool, held_mask, builder))

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xBA7C4]))
    opt = nn.AdamState(lr=config.lr)
    step = 0
    for epoch in range(config.epochs):
        for coll, active, pos_pool, neg_pool, held_mask, builder in plans:
            for _ in range(config.minibatches_per_graph):
                ids, labels = build_minibatch(pos_pool, neg_pool, config.minibatch_size, rng)
                result.heldout_central_hits += int(np.count_nonzero(held_mask[ids]))
                samples = _build(builder, ids, active, step, config.threads)
                logits, cache = model.forward_batch(samples)
                loss, dlogits = nn.weighted_bce(logits, labels, config.omega0, config.omega1)
                if not np.isfinite(loss):
                    bad = np.flatnonzero(~np.all(np.isfinite(logits), axis=1))
                    who = coll.domains.name(int(ids[bad[0]])) if len(bad) else "unknown"
                    raise TrainingError(f"non-finite loss at batch {step} (epoch {epoch}, "
                                        f"snapshot {coll.snapshot_label}); first offending "
                                        f"sample: {who}")
                grads = model.backward(cache, dlogits)
                nn.adam_step(opt, model.params, grads)
                result.losses.append(loss)
                step += 1
            result.heldout_positive_hits += builder.watch_hits
            builder.watch_hits = 0
        log.info("epoch %d: mean loss of last block %.5f", epoch,
                 float(np.mean(result.losses[-config.minibatches_per_graph:])))
    return result


class HmilScorer:
    """Scorer for kfold_evaluate and predict: builds samples and returns P(malicious)."""

    def __init__(self, model: HmilModel, collection: SnapshotCollection, k_minus: int = 100,
                 seed: int = 0, entity_degree_cap: int | None = None, threads: int = 1,
                 batch_size: int = 512):
        self.model = model
        self.builder = SampleBuilder(collection, model.relations, model.arch.steps, k_minus,
                                     seed, entity_degree_cap)
        self.threads = threads
        self.batch_size = batch_size

    @property
    def leak_hits(self) -> int:
        return self.builder.watch_hits

    def __call__(self, ids: np.ndarray, active: np.ndarray, watch: np.ndarray | None = None,
                 fold: int = 0) -> np.ndarray:
        self.builder.watch = watch
        out = []
        for k in range(0, len(ids), self.batch_size):
            chunk = ids[k:k + self.batch_size]
            # key sample randomness by fold so reruns of a fold repeat exactly
            samples = _build(self.builder, chunk, active, EVAL_KEY + fold, self.threads)
            out.append(self.model.predict_proba(samples, self.batch_size))
        self.builder.watch = None
        return np.concatenate(out) if out else np.empty(0)


def write_losses(path: str | Path, losses: Sequence[float]) -> None:
    write_csv(Path(path), ("batch_index", "loss"), ((i, repr(float(v))) for i, v in enumerate(losses)))
