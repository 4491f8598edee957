"""Synthetic multi-relation snapshots with power-law entity degrees and planted campaigns.

A *world* fixes domain names, campaign membership, the denylist and each
background entity's popularity. A *week* draws the edges of every relation
from the world with its own seed, so several weeks share labels but differ
in structure, like consecutive snapshots of the same infrastructure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph_store import (MANY_TO_MANY, MANY_TO_ONE, Denylist, SnapshotCollection,
                          collection_from_edges, parse_cardinality, write_denylist, write_relation)
from .transform import TransformedView, shared_entities

log = logging.getLogger(__name__)

BENIGN = "-"


@dataclass(frozen=True)
class RelationSpec:
    name: str
    cardinality: str = MANY_TO_MANY
    n_entities: int = 1000
    exponent: float = 2.5

    def __post_init__(self):
        object.__setattr__(self, "cardinality", parse_cardinality(self.cardinality))


DEFAULT_RELATIONS = (
    RelationSpec("ip", MANY_TO_MANY, 4000, 2.5),
    RelationSpec("email", MANY_TO_ONE, 3000, 2.5),
    RelationSpec("cert", MANY_TO_MANY, 3000, 2.5),
)


@dataclass(frozen=True)
class SynthConfig:
    n_domains: int = 5000
    relations: tuple = DEFAULT_RELATIONS
    n_campaigns: int = 10
    campaign_size: int = 50
    campaign_entities: int = 3
    p_in: float = 0.6
    p_bg: float = 0.002
    coverage: float = 0.8
    seed: int = 0
    n_weeks: int = 2

    def validate(self) -> None:
        if self.n_domains < 1 or self.n_campaigns < 0 or self.campaign_size < 1:
            raise ValueError("n_domains and campaign_size must be >= 1, n_campaigns >= 0")
        if self.n_campaigns * self.campaign_size > self.n_domains:
            raise ValueError(f"{self.n_campaigns} campaigns of {self.campaign_size} domains "
                             f"do not fit in {self.n_domains} domains")
        if not 0.0 <= self.p_bg < self.p_in <= 1.0:
            raise ValueError("need 0 <= p_bg < p_in <= 1")
        if not 0.0 < self.coverage <= 1.0:
            raise ValueError("coverage must lie in (0, 1]")
        if self.campaign_entities < 1 or self.n_weeks < 1:
            raise ValueError("campaign_entities and n_weeks must be >= 1")
        names = [r.name for r in self.relations]
        if not names or len(set(names)) != len(names):
            raise ValueError("relation names must be non-empty and unique")
        for r in self.relations:
            if r.exponent <= 1.0:
                raise ValueError(f"relation {r.name}: degree exponent must exceed 1")
            if r.n_entities < 1:
                raise ValueError(f"relation {r.name}: n_entities must be >= 1")


def zipf_degrees(n: int, exponent: float, x_max: int, rng: np.random.Generator) -> np.ndarray:
    """Draw `n` values from P(k) ~ k^-exponent on 1..x_max by inverse CDF."""
    k = np.arange(1, x_max + 1, dtype=np.float64)
    cdf = np.cumsum(k ** -exponent)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, rng.random(n), side="right").clip(0, x_max - 1) + 1


@dataclass
class World:
    config: SynthConfig
    names: list
    campaign: np.ndarray            # campaign index per domain, -1 for benign
    denylisted: np.ndarray          # bool per domain
    popularity: dict = field(default_factory=dict)  # relation -> background entity degrees


@dataclass
class SynthSnapshot:
    collection: SnapshotCollection
    denylist: Denylist
    truth: dict          # domain name -> campaign tag or BENIGN
    edges: dict          # relation -> list of (domain, entity)


def make_world(config: SynthConfig) -> World:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0FFEE]))
    width = len(str(config.n_domains - 1))
    names = [f"d{i:0{width}d}.example" for i in range(config.n_domains)]
    campaign = np.full(config.n_domains, -1, dtype=np.int64)
    members = rng.choice(config.n_domains, size=config.n_campaigns * config.campaign_size,
                         replace=False)
    campaign[members] = np.repeat(np.arange(config.n_campaigns), config.campaign_size)
    # denylist: the same coverage within every campaign, so each family is represented
    denylisted = np.zeros(config.n_domains, dtype=bool)
    n_listed = max(1, int(round(config.coverage * config.campaign_size)))
    for c in range(config.n_campaigns):
        dom = np.flatnonzero(campaign == c)
        denylisted[rng.choice(dom, size=n_listed, replace=False)] = True
    popularity = {r.name: zipf_degrees(r.n_entities, r.exponent, config.n_domains, rng)
                  for r in config.relations}
    return World(config, names, campaign, denylisted, popularity)


def _campaign_tag(c: int) -> str:
    return f"campaign{c:02d}"


def _week_edges(world: World, week: int) -> dict:
    cfg = world.config
    n = cfg.n_domains
    edges = {}
    for ri, rel in enumerate(cfg.relations):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, week, ri]))
        pop = world.popularity[rel.name]
        rows, cols = [], []
        n_bg = rel.n_entities
        camp_ent = n_bg + np.arange(cfg.n_campaigns * cfg.campaign_entities).reshape(
            cfg.n_campaigns, cfg.campaign_entities) if cfg.n_campaigns else np.empty((0, 0), int)
        if rel.cardinality == MANY_TO_ONE:
            owner = rng.choice(n_bg, size=n, p=pop / pop.sum())
            # campaign members move to one of their campaign's entities w.p. p_in;
            # everyone else lands on a given campaign entity w.p. p_bg
            u = rng.random(n)
            for c in range(cfg.n_campaigns):
                dom = np.flatnonzero(world.campaign == c)
                hit = dom[u[dom] < cfg.p_in]
                owner[hit] = rng.choice(camp_ent[c], size=len(hit))
            if camp_ent.size:
                target = rng.choice(camp_ent.ravel(), size=n)
                stray = rng.random(n) < min(1.0, cfg.p_bg * camp_ent.size)
                stray &= ~((world.campaign >= 0) & (u < cfg.p_in))
                stray &= world.campaign != (target - n_bg) // cfg.campaign_entities
                owner[stray] = target[stray]
            rows.append(np.arange(n))
            cols.append(owner)
        else:
            for e in range(n_bg):
                k = min(int(pop[e]), n)
                rows.append(rng.choice(n, size=k, replace=False))
                cols.append(np.full(k, e))
            for c in range(cfg.n_campaigns):
                inside = world.campaign == c
                for e in camp_ent[c]:
                    p = np.where(inside, cfg.p_in, cfg.p_bg)
                    dom = np.flatnonzero(rng.random(n) < p)
                    rows.append(dom)
                    cols.append(np.full(len(dom), e))
        r = np.concatenate(rows) if rows else np.empty(0, np.int64)
        c_ = np.concatenate(cols) if cols else np.empty(0, np.int64)
        edges[rel.name] = (r.astype(np.int64), c_.astype(np.int64))
    return edges


def _entity_key(rel: RelationSpec, e: int, n_bg: int) -> str:
    if e < n_bg:
        return f"{rel.name}-{e}"
    return f"{rel.name}-c{e - n_bg}"


def generate(config: SynthConfig, week: int = 0, world: World | None = None) -> SynthSnapshot:
    """One week of the world described by `config`; deterministic in (seed, week)."""
    world = world or make_world(config)
    raw = _week_edges(world, week)
    label = f"week{week}"
    edge_lists = {}
    for rel in config.relations:
        r, c = raw[rel.name]
        order = np.lexsort((c, r))
        edge_lists[rel.name] = [(world.names[i], _entity_key(rel, int(e), rel.n_entities))
                                for i, e in zip(r[order].tolist(), c[order].tolist())]
    coll = _collection_from_edges(config, edge_lists, label)
    truth = {name: (BENIGN if c < 0 else _campaign_tag(int(c)))
             for name, c in zip(world.names, world.campaign)}
    entries = {world.names[i]: _campaign_tag(int(world.campaign[i]))
               for i in np.flatnonzero(world.denylisted)}
    dl = Denylist(entries, label)
    dl.not_in_snapshot = [d for d in entries if d not in coll.domains]
    return SynthSnapshot(coll, dl, truth, edge_lists)


def _collection_from_edges(config: SynthConfig, edge_lists: dict, label: str) -> SnapshotCollection:
    rels = sorted(config.relations, key=lambda r: r.name)
    return collection_from_edges([(r.name, r.cardinality, edge_lists[r.name]) for r in rels], label)


def _write_relations(rel_dir: Path, config: SynthConfig, edge_lists: dict) -> list:
    paths = []
    for rel in sorted(config.relations, key=lambda r: r.name):
        p = rel_dir / f"{rel.name}.tsv"
        write_relation(p, rel.name, rel.cardinality, edge_lists[rel.name])
        paths.append(p)
    return paths


def write_snapshot(out_dir: str | Path, config: SynthConfig, snap: SynthSnapshot) -> Path:
    """Write relations/, denylist.tsv and ground_truth.tsv under out_dir/<label>."""
    root = Path(out_dir) / snap.collection.snapshot_label
    _write_relations(root / "relations", config, snap.edges)
    write_denylist(root / "denylist.tsv", sorted(snap.denylist.entries.items()))
    with (root / "ground_truth.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        for name in sorted(snap.truth):
            tag = snap.truth[name]
            fh.write(f"{name}\t{0 if tag == BENIGN else 1}\t{tag}\n")
    return root


def generate_weeks(config: SynthConfig) -> list:
    world = make_world(config)
    return [generate(config, w, world) for w in range(config.n_weeks)]


def community_ratio(snap: SynthSnapshot, relation: str, rng_seed: int = 0,
                    n_pairs: int = 2000) -> float:
    """Mean shared entities for same-campaign pairs over different-campaign pairs."""
    coll = snap.collection
    view = TransformedView(coll[relation])
    tags = {}
    for name, tag in snap.truth.items():
        idx = coll.domains.get(name)
        if idx is not None and tag != BENIGN:
            tags.setdefault(tag, []).append(idx)
    groups = [np.array(v) for _, v in sorted(tags.items())]
    if len(groups) < 2:
        raise ValueError("need at least two campaigns")
    rng = np.random.default_rng(rng_seed)
    same, cross = [], []
    for _ in range(n_pairs):
        a, b = rng.choice(len(groups), size=2, replace=False)
        x, y = rng.choice(groups[a], size=2, replace=False)
        same.append(shared_entities(view, int(x), int(y)))
        cross.append(shared_entities(view, int(x), int(rng.choice(groups[b]))))
    return float(np.mean(same)) / max(float(np.mean(cross)), 1e-9)
