"""Immutable storage of per-relation bipartite domain/entity graphs.

A snapshot (one observation window, e.g. a week) is a set of bipartite
graphs sharing a single domain index. Adjacency is kept in CSR form in both
directions with sorted neighbor lists, so set operations on neighborhoods
reduce to merges over small integer arrays.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MANY_TO_MANY = "many-to-many"
MANY_TO_ONE = "many-to-one"

_CARDINALITY_ALIASES = {
    "many-to-many": MANY_TO_MANY,
    "m2m": MANY_TO_MANY,
    "many-to-one": MANY_TO_ONE,
    "m2o": MANY_TO_ONE,
}


class IngestError(ValueError):
    """Malformed or inconsistent input file."""


class SnapshotMismatch(ValueError):
    """An id from one snapshot was used against another snapshot's graph."""


def parse_cardinality(token: str) -> str:
    try:
        return _CARDINALITY_ALIASES[token.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown cardinality {token!r}") from None


@dataclass(frozen=True)
class DomainId:
    id: int
    name: str
    snapshot: str


@dataclass(frozen=True)
class EntityId:
    id: int
    raw: str
    relation: str
    snapshot: str


class DomainTable:
    """Bijection between second-level domain names and dense indices."""

    def __init__(self, names: Sequence[str] = (), snapshot: str = ""):
        self.snapshot = snapshot
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        idx = self._index.get(name)
        if idx is None:
            idx = len(self._names)
            self._index[name] = idx
            self._names.append(name)
        return idx

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        return self._index[name]

    def get(self, name: str, default=None):
        return self._index.get(name, default)

    def name(self, idx: int) -> str:
        return self._names[idx]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def domain(self, name_or_idx) -> DomainId:
        if isinstance(name_or_idx, str):
            idx = self._index[name_or_idx]
        else:
            idx = int(name_or_idx)
        return DomainId(idx, self._names[idx], self.snapshot)


def _csr(rows: np.ndarray, cols: np.ndarray, n_rows: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, cols.astype(np.int64)


class BipartiteGraph:
    """One relation's domain/entity adjacency; read-only after construction."""

    def __init__(
        self,
        relation: str,
        cardinality: str,
        n_domains: int,
        entity_keys: Sequence[str],
        domain_idx: np.ndarray,
        entity_idx: np.ndarray,
        multiplicity: np.ndarray | None = None,
        snapshot: str = "",
    ):
        self.relation = relation
        self.cardinality = parse_cardinality(cardinality)
        self.snapshot = snapshot
        self.n_domains = int(n_domains)
        self.entity_keys = list(entity_keys)
        self.n_entities = len(self.entity_keys)

        d = np.asarray(domain_idx, dtype=np.int64)
        e = np.asarray(entity_idx, dtype=np.int64)
        if multiplicity is None:
            multiplicity = np.ones(len(d), dtype=np.int64)
        self.fwd_indptr, self.fwd_indices = _csr(d, e, self.n_domains)
        order = np.lexsort((e, d))
        self.multiplicity = np.asarray(multiplicity, dtype=np.int64)[order]
        self.rev_indptr, self.rev_indices = _csr(e, d, self.n_entities)
        self.domain_degree = np.diff(self.fwd_indptr)
        self.entity_degree = np.diff(self.rev_indptr)
        for arr in (self.fwd_indptr, self.fwd_indices, self.rev_indptr, self.rev_indices,
                    self.multiplicity, self.domain_degree, self.entity_degree):
            arr.setflags(write=False)

    @property
    def n_edges(self) -> int:
        return len(self.fwd_indices)

    def domain_neighbors(self, d: int) -> np.ndarray:
        return self.fwd_indices[self.fwd_indptr[d]:self.fwd_indptr[d + 1]]

    def entity_neighbors(self, v: int) -> np.ndarray:
        return self.rev_indices[self.rev_indptr[v]:self.rev_indptr[v + 1]]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        rows = np.repeat(np.arange(self.n_domains, dtype=np.int64), self.domain_degree)
        return rows, self.fwd_indices.copy()

    def validate(self) -> None:
        """Check symmetry, duplicates and cardinality; raise AssertionError otherwise."""
        fwd = set(zip(*(a.tolist() for a in self.edges())))
        assert len(fwd) == self.n_edges, "duplicate edges"
        rev_rows = np.repeat(np.arange(self.n_entities, dtype=np.int64), self.entity_degree)
        rev = set(zip(self.rev_indices.tolist(), rev_rows.tolist()))
        assert fwd == rev, "forward/reverse adjacency differ"
        if self.cardinality == MANY_TO_ONE:
            assert self.domain_degree.max(initial=0) <= 1, "many-to-one domain with >1 entity"

    def __repr__(self) -> str:
        return (f"BipartiteGraph({self.relation!r}, {self.cardinality}, "
                f"domains={self.n_domains}, entities={self.n_entities}, edges={self.n_edges})")


def bipartite_neighbors(g: BipartiteGraph, v: DomainId | EntityId) -> np.ndarray:
    """Sorted neighbor ids of a domain (entity ids) or an entity (domain ids)."""
    if v.snapshot != g.snapshot:
        raise SnapshotMismatch(f"id from snapshot {v.snapshot!r} used on {g.snapshot!r}")
    if isinstance(v, DomainId):
        if not 0 <= v.id < g.n_domains:
            return np.empty(0, dtype=np.int64)
        return g.domain_neighbors(v.id)
    if v.relation != g.relation:
        raise SnapshotMismatch(f"entity of relation {v.relation!r} used on {g.relation!r}")
    return g.entity_neighbors(v.id)


@dataclass
class SnapshotCollection:
    snapshot_label: str
    domains: DomainTable
    graphs: dict[str, BipartiteGraph] = field(default_factory=dict)

    @property
    def relations(self) -> list[str]:
        return list(self.graphs)

    def __getitem__(self, relation: str) -> BipartiteGraph:
        return self.graphs[relation]

    def validate(self) -> None:
        for g in self.graphs.values():
            assert g.n_domains == len(self.domains)
            g.validate()

    def to_bytes(self) -> bytes:
        """Canonical serialization; equal collections give equal bytes."""
        parts = [self.snapshot_label.encode(), b"\0"]
        parts += [n.encode() + b"\n" for n in self.domains.names]
        for name, g in self.graphs.items():
            parts += [b"\0", name.encode(), b"\t", g.cardinality.encode(), b"\n"]
            parts += [k.encode() + b"\n" for k in g.entity_keys]
            for arr in (g.fwd_indptr, g.fwd_indices, g.multiplicity, g.rev_indptr, g.rev_indices):
                parts.append(arr.astype("<i8").tobytes())
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _read_relation(path: Path) -> tuple[str, str, list[tuple[str, str, int]]]:
    """Parse one relation file into (name, cardinality, [(domain, entity, lineno)])."""
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        return path.stem, MANY_TO_MANY, []
    head = lines[0].split("\t")
    if len(head) != 2:
        raise IngestError(f"{path}:1: header must be 'relation<TAB>cardinality'")
    try:
        card = parse_cardinality(head[1])
    except ValueError as exc:
        raise IngestError(f"{path}:1: {exc}") from None
    edges = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 2 or not cols[0] or not cols[1]:
            raise IngestError(f"{path}:{lineno}: expected 'domain<TAB>entity', got {line!r}")
        edges.append((cols[0], cols[1], lineno))
    return head[0].strip(), card, edges


def ingest_relations(files: Iterable[str | Path], snapshot_label: str) -> SnapshotCollection:
    """Build a snapshot from relation TSV files.

    Domain ids are assigned in first-seen order over the files in the order
    given. Duplicate edges are collapsed; their count is kept as edge
    multiplicity.
    """
    parsed = []
    seen_names = set()
    for f in files:
        path = Path(f)
        name, card, edges = _read_relation(path)
        if name in seen_names:
            raise IngestError(f"{path}: duplicate relation name {name!r}")
        seen_names.add(name)
        parsed.append((str(path), name, card, edges))
    return _build_collection(parsed, snapshot_label)


def collection_from_edges(relations: Iterable[tuple[str, str, Iterable[tuple[str, str]]]],
                          snapshot_label: str) -> SnapshotCollection:
    """In-memory counterpart of ingest_relations for (name, cardinality, edges) triples."""
    parsed = []
    for name, card, edges in relations:
        parsed.append((name, name, parse_cardinality(card),
                       [(d, e, i) for i, (d, e) in enumerate(edges, 1)]))
    if len({p[1] for p in parsed}) != len(parsed):
        raise IngestError("duplicate relation name")
    return _build_collection(parsed, snapshot_label)


def _build_collection(parsed: list, snapshot_label: str) -> SnapshotCollection:
    domains = DomainTable(snapshot=snapshot_label)
    for _, _, _, edges in parsed:
        for dname, _, _ in edges:
            domains.add(dname)

    coll = SnapshotCollection(snapshot_label, domains)
    for path, name, card, edges in parsed:
        ent_index: dict[str, int] = {}
        counts: Counter = Counter()
        m2o_owner: dict[int, tuple[str, int]] = {}
        for dname, ename, lineno in edges:
            d = domains.index(dname)
            e = ent_index.setdefault(ename, len(ent_index))
            if card == MANY_TO_ONE:
                prev = m2o_owner.get(d)
                if prev is not None and prev[0] != ename:
                    raise IngestError(
                        f"{path}:{lineno}: domain {dname!r} has two entities "
                        f"({prev[0]!r}, {ename!r}) in many-to-one relation {name!r}")
                m2o_owner[d] = (ename, lineno)
            counts[(d, e)] += 1
        keys = list(counts)
        d_idx = np.array([k[0] for k in keys], dtype=np.int64)
        e_idx = np.array([k[1] for k in keys], dtype=np.int64)
        mult = np.array([counts[k] for k in keys], dtype=np.int64)
        coll.graphs[name] = BipartiteGraph(name, card, len(domains), list(ent_index),
                                           d_idx, e_idx, mult, snapshot=snapshot_label)
    return coll


def load_snapshot(directory: str | Path, label: str | None = None) -> SnapshotCollection:
    """Read `<dir>/relations/*.tsv`; the label defaults to the directory name."""
    directory = Path(directory)
    rel_dir = directory / "relations"
    if not rel_dir.is_dir():
        raise IngestError(f"{directory}: missing relations/ directory")
    files = sorted(rel_dir.glob("*.tsv"))
    return ingest_relations(files, label or directory.name)


def write_relation(path: str | Path, relation: str, cardinality: str,
                   edges: Iterable[tuple[str, str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{relation}\t{parse_cardinality(cardinality)}\n")
        for d, e in edges:
            fh.write(f"{d}\t{e}\n")


@dataclass
class Denylist:
    entries: dict[str, str]
    as_of: str = ""
    not_in_snapshot: list[str] = field(default_factory=list)

    def __contains__(self, domain: str) -> bool:
        return domain in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def family(self, domain: str) -> str:
        return self.entries[domain]

    def family_histogram(self) -> dict[str, int]:
        return dict(Counter(self.entries.values()))

    def without(self, domains: Iterable[str]) -> "Denylist":
        drop = set(domains)
        return Denylist({d: f for d, f in self.entries.items() if d not in drop}, self.as_of)

    def mask(self, table: DomainTable) -> np.ndarray:
        """Boolean membership vector over a snapshot's domain ids."""
        m = np.zeros(len(table), dtype=bool)
        for d in self.entries:
            idx = table.get(d)
            if idx is not None:
                m[idx] = True
        return m


def load_denylist(path: str | Path, snapshot_label: str = "",
                  domains: DomainTable | None = None) -> Denylist:
    """Read `domain<TAB>family` lines; a missing family becomes "unknown"."""
    path = Path(path)
    entries: dict[str, str] = {}
    missing_family = 0
    if path.exists():
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            cols = line.split("\t")
            dom = cols[0].strip()
            fam = cols[1].strip() if len(cols) > 1 else ""
            if not fam:
                missing_family += 1
                fam = "unknown"
            if dom in entries and entries[dom] != fam:
                log.warning("%s:%d: %s listed with families %r and %r; keeping the first",
                            path, lineno, dom, entries[dom], fam)
                continue
            entries.setdefault(dom, fam)
    else:
        log.warning("denylist %s does not exist; using an empty denylist", path)
    if missing_family:
        log.warning("%s: %d entries without family column, set to 'unknown'", path, missing_family)
    dl = Denylist(entries, snapshot_label)
    if domains is not None:
        dl.not_in_snapshot = [d for d in entries if d not in domains]
        if dl.not_in_snapshot:
            log.info("denylist: %d of %d domains not observed in snapshot %s",
                     len(dl.not_in_snapshot), len(entries), snapshot_label)
    return dl


def write_denylist(path: str | Path, entries: Iterable[tuple[str, str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for d, fam in entries:
            fh.write(f"{d}\t{fam}\n")


@dataclass
class Snapshot:
    """A snapshot collection together with its denylist."""

    collection: SnapshotCollection
    denylist: Denylist
    path: Path | None = None

    @property
    def label(self) -> str:
        return self.collection.snapshot_label


def open_snapshot(directory: str | Path) -> Snapshot:
    directory = Path(directory)
    coll = load_snapshot(directory)
    dl = load_denylist(directory / "denylist.tsv", coll.snapshot_label, coll.domains)
    return Snapshot(coll, dl, directory)
