"""Per-relation HMIL networks joined by a final product layer.

For every relation and every neighborhood level the network has a vertex
leaf network, an instance leaf network, a bag layer (aggregation followed
by a dense network) and a product network. None of these share parameters
across relations or levels. Relation outputs are concatenated and mapped to
two logits by the final product network.

Samples are collated into flat matrices before the forward pass so that
a whole minibatch is processed with a handful of matrix products and
segment reductions.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .features import EDGE_FEATURES, VERTEX_FEATURES
from .hmil import MISSING, Bag, Leaf, Product, SchemaMismatch, check_schema, graph_schema

N_VERTEX = len(VERTEX_FEATURES)
N_EDGE = len(EDGE_FEATURES)

# Layer widths as printed, first entry = input width.
ARCH_WIDTHS = {
    "Mb": {"f_hat": (2, 10, 10), "f_tilde": (6, 30, 30), "g": (120, 60, 60),
           "r_rel": (70, 20), "r": (220, 100, 2)},
    "Mw": {"f_hat": (2, 20), "f_tilde": (6, 60), "g": (240, 120),
           "r_rel": (140, 20), "r": (1320, 2)},
    "Md": {"f_hat": (2, 5, 5, 5), "f_tilde": (6, 15, 15, 15, 15), "g": (60, 60, 30, 30),
           "r_rel": (35, 20, 20), "r": (220, 60, 60, 2)},
}


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    f_hat: tuple
    f_tilde: tuple
    g: tuple
    r_rel: tuple
    r: tuple
    n_relations: int
    steps: int = 1
    name: str = "custom"
    errata: tuple = ()

    def f_tilde_input(self, level: int) -> int:
        """Instance width at a level: edge features, plus the child state above level 1."""
        return self.f_tilde[0] if level == 1 else self.r_rel[-1] + N_EDGE

    def audit(self) -> list[str]:
        """Arithmetic consistency problems (empty when the architecture is constructible)."""
        problems = []
        if self.f_hat[0] != N_VERTEX:
            problems.append(f"f_hat input {self.f_hat[0]} != {N_VERTEX} vertex features")
        if self.f_tilde[0] != N_EDGE:
            problems.append(f"f_tilde input {self.f_tilde[0]} != {N_EDGE} edge features")
        if self.g[0] != 4 * self.f_tilde[-1]:
            problems.append(f"g input {self.g[0]} != 4 * {self.f_tilde[-1]}")
        if self.r_rel[0] != self.f_hat[-1] + self.g[-1]:
            problems.append(f"r_rel input {self.r_rel[0]} != {self.f_hat[-1]} + {self.g[-1]}")
        if self.r[0] != self.n_relations * self.r_rel[-1]:
            problems.append(f"r input {self.r[0]} != {self.n_relations} * {self.r_rel[-1]}")
        if self.r[-1] != 2:
            problems.append(f"final output {self.r[-1]} != 2")
        if self.steps < 1:
            problems.append("steps must be >= 1")
        return problems

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("f_hat", "f_tilde", "g", "r_rel", "r", "errata"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        for k in ("f_hat", "f_tilde", "g", "r_rel", "r", "errata"):
            d[k] = tuple(d.get(k, ()))
        return cls(**d)


def builtin_arch(name: str, n_relations: int = 11, steps: int = 1) -> ArchitectureSpec:
    """Widths of the baseline, wide and deep architectures scaled to `n_relations`.

    The final layer input is always derived as n_relations * r_rel output.
    For Mw the printed value (1320) cannot be constructed and is recorded as
    an erratum on the returned spec.
    """
    try:
        row = ARCH_WIDTHS[name]
    except KeyError:
        raise ArchitectureError(f"unknown architecture {name!r}; choose from {sorted(ARCH_WIDTHS)}") from None
    r_in = n_relations * row["r_rel"][-1]
    errata = ()
    if n_relations == 11 and row["r"][0] != r_in:
        errata = (f"r input printed as {row['r'][0]}, derived {r_in}",)
    elif row["r"][0] != 11 * row["r_rel"][-1]:
        errata = (f"r input printed as {row['r'][0]}, derived {11 * row['r_rel'][-1]} for 11 relations",)
    spec = ArchitectureSpec(tuple(row["f_hat"]), tuple(row["f_tilde"]), tuple(row["g"]),
                            tuple(row["r_rel"]), (r_in,) + tuple(row["r"][1:]),
                            n_relations, steps, name, errata)
    problems = spec.audit()
    if problems:
        raise ArchitectureError("; ".join(problems))
    return spec


# ---------------------------------------------------------------- collation


@dataclass
class LevelBatch:
    xv: np.ndarray            # (n, vertex features)
    offsets: np.ndarray       # (n + 1,) bag boundaries into instance rows
    weights: np.ndarray       # (m,)
    edges: np.ndarray         # (m, edge features)
    child: "LevelBatch | None" = None  # (m rows) for levels above 1


def _bag_rows(bag: Bag) -> tuple[np.ndarray | None, list]:
    if bag.matrix is not None:
        return bag.matrix, []
    return None, bag.children


def collate_level(samples: Sequence[Product], steps: int) -> LevelBatch:
    xv = np.array([s.children[0].data for s in samples], dtype=np.float64).reshape(len(samples), N_VERTEX)
    bags = [s.children[1] for s in samples]
    sizes = np.fromiter((len(b) for b in bags), np.int64, len(bags))
    offsets = np.zeros(len(bags) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    weights = np.concatenate([b.weights for b in bags]) if bags else np.empty(0)
    if steps == 1:
        mats = [b.matrix if b.matrix is not None else
                np.array([c.data for c in b.children]).reshape(len(b), N_EDGE) for b in bags]
        edges = np.concatenate(mats) if mats else np.empty((0, N_EDGE))
        return LevelBatch(xv, offsets, weights, edges.reshape(-1, N_EDGE))
    insts = [c for b in bags for c in b.children]
    edges = np.array([c.children[1].data for c in insts], dtype=np.float64).reshape(-1, N_EDGE)
    child = collate_level([c.children[0] for c in insts], steps - 1)
    return LevelBatch(xv, offsets, weights, edges, child)


# ---------------------------------------------------------------- model


def _mlp_forward(params, layers, x):
    caches = []
    for wname, bname, act in layers:
        x, c = nn.dense_forward(params[wname], params[bname], x, act)
        caches.append(c)
    return x, caches


def _mlp_backward(params, layers, caches, dy, grads):
    for (wname, bname, _), c in zip(reversed(layers), reversed(caches)):
        dy, dW, db = nn.dense_backward(params[wname], c, dy)
        grads[wname] += dW
        grads[bname] += db
    return dy


@dataclass
class _Level:
    f_hat: list
    f_tilde: list
    g: list
    r_rel: list
    agg: tuple   # names of (rho_r, rho_p, theta_c)
    empty: str


@dataclass
class HmilModel:
    arch: ArchitectureSpec
    relations: list
    params: dict = field(default_factory=dict)
    feature_order: dict = field(default_factory=lambda: {"vertex": list(VERTEX_FEATURES),
                                                         "edge": list(EDGE_FEATURES)})

    def __post_init__(self):
        if len(self.relations) != self.arch.n_relations:
            raise ArchitectureError(
                f"{len(self.relations)} relations but architecture expects {self.arch.n_relations}")
        self._levels: list[list[_Level]] = []
        self._missing: list[str] = []
        specs: dict[str, tuple] = {}

        def mlp(prefix, widths, last_act):
            layers = []
            for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                act = last_act if j == len(widths) - 2 else "relu"
                layers.append((f"{prefix}.{j}.W", f"{prefix}.{j}.b", act))
                specs[f"{prefix}.{j}.W"] = ("glorot", (b, a))
                specs[f"{prefix}.{j}.b"] = ("zeros", (b,))
            return layers

        a = self.arch
        for i in range(a.n_relations):
            levels = []
            for s in range(1, a.steps + 1):
                p = f"rel{i}.lvl{s}"
                ft = (a.f_tilde_input(s),) + tuple(a.f_tilde[1:])
                agg_dim = ft[-1]
                specs[f"{p}.agg.rho_r"] = ("rho", (agg_dim,))
                specs[f"{p}.agg.rho_p"] = ("rho", (agg_dim,))
                specs[f"{p}.agg.theta_c"] = ("zeros", (agg_dim,))
                specs[f"{p}.empty"] = ("zeros", (a.g[-1],))
                levels.append(_Level(
                    f_hat=mlp(f"{p}.f_hat", a.f_hat, "relu"),
                    f_tilde=mlp(f"{p}.f_tilde", ft, "tanh"),
                    g=mlp(f"{p}.g", a.g, "relu"),
                    r_rel=mlp(f"{p}.r_rel", a.r_rel, "relu"),
                    agg=(f"{p}.agg.rho_r", f"{p}.agg.rho_p", f"{p}.agg.theta_c"),
                    empty=f"{p}.empty"))
            self._levels.append(levels)
            specs[f"rel{i}.missing"] = ("zeros", (a.r_rel[-1],))
            self._missing.append(f"rel{i}.missing")
        self._final = mlp("r", a.r, "identity")
        self._specs = specs

    @classmethod
    def create(cls, arch: ArchitectureSpec, relations: Sequence[str], seed: int = 0) -> "HmilModel":
        m = cls(arch, list(relations))
        rng = np.random.default_rng(seed)
        for name, (kind, shape) in m._specs.items():
            if kind == "glorot":
                m.params[name] = nn.glorot_init(shape[0], shape[1], rng)
            elif kind == "rho":
                m.params[name] = np.full(shape, nn.softplus_inv(1.0))
            else:
                m.params[name] = np.zeros(shape)
        return m

    @property
    def schema(self):
        return graph_schema(self.arch.n_relations, self.arch.steps)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # ------------------------------------------------------------ forward

    def _level_forward(self, i: int, s: int, batch: LevelBatch):
        P = self.params
        lv = self._levels[i][s - 1]
        child_cache = None
        if s == 1:
            zin = batch.edges
        else:
            hc, child_cache = self._level_forward(i, s - 1, batch.child)
            zin = np.concatenate([hc, batch.edges], axis=1)
        z, ft_c = _mlp_forward(P, lv.f_tilde, zin)
        rho_r, rho_p, theta_c = (P[n] for n in lv.agg)
        agg, nonempty, agg_c = nn.aggregate_forward(z, batch.offsets, batch.weights,
                                                    rho_r, rho_p, theta_c)
        g_ne, g_c = _mlp_forward(P, lv.g, agg)
        n = len(batch.xv)
        gfull = np.tile(P[lv.empty], (n, 1))
        gfull[nonempty] = g_ne
        fh, fh_c = _mlp_forward(P, lv.f_hat, batch.xv)
        h, r_c = _mlp_forward(P, lv.r_rel, np.concatenate([fh, gfull], axis=1))
        return h, (child_cache, ft_c, nonempty, agg_c, g_c, fh_c, r_c, fh.shape[1], zin.shape[1])

    def _level_backward(self, i: int, s: int, cache, dh, grads):
        P = self.params
        lv = self._levels[i][s - 1]
        child_cache, ft_c, nonempty, agg_c, g_c, fh_c, r_c, fh_dim, zin_dim = cache
        dcat = _mlp_backward(P, lv.r_rel, r_c, dh, grads)
        _mlp_backward(P, lv.f_hat, fh_c, dcat[:, :fh_dim], grads)
        dg = dcat[:, fh_dim:]
        grads[lv.empty] += dg[~nonempty].sum(axis=0)
        dagg = _mlp_backward(P, lv.g, g_c, dg[nonempty], grads)
        if agg_c is None:
            return
        dz, d_rr, d_rp, d_tc = nn.aggregate_backward(agg_c, dagg)
        grads[lv.agg[0]] += d_rr
        grads[lv.agg[1]] += d_rp
        grads[lv.agg[2]] += d_tc
        dzin = _mlp_backward(P, lv.f_tilde, ft_c, dz, grads)
        if s > 1:
            self._level_backward(i, s - 1, child_cache, dzin[:, :zin_dim - N_EDGE], grads)

    def collate(self, samples: Sequence[Product]):
        """Per relation: (rows present, collated batch of those rows)."""
        out = []
        for i in range(self.arch.n_relations):
            present = np.array([s.children[i] is not MISSING for s in samples], dtype=bool)
            rows = [s.children[i] for s, p in zip(samples, present) if p]
            out.append((present, collate_level(rows, self.arch.steps) if rows else None))
        return out

    def forward_batch(self, samples: Sequence[Product], validate: bool = False):
        """Logits (n, 2) and a cache for `backward`."""
        if validate:
            schema = self.schema
            for k, s in enumerate(samples):
                msg = check_schema(s, schema)
                if msg:
                    raise SchemaMismatch(f"sample {k}: {msg}")
        n = len(samples)
        batches = self.collate(samples)
        rel_out, caches = [], []
        for i, (present, batch) in enumerate(batches):
            hfull = np.tile(self.params[self._missing[i]], (n, 1))
            cache = None
            if batch is not None:
                h, cache = self._level_forward(i, self.arch.steps, batch)
                hfull[present] = h
            rel_out.append(hfull)
            caches.append((present, cache))
        logits, fin_c = _mlp_forward(self.params, self._final, np.concatenate(rel_out, axis=1))
        return logits, (caches, fin_c)

    def backward(self, cache, dlogits: np.ndarray) -> dict:
        caches, fin_c = cache
        grads = self.zero_grads()
        dcat = _mlp_backward(self.params, self._final, fin_c, dlogits, grads)
        width = self.arch.r_rel[-1]
        for i, (present, c) in enumerate(caches):
            dh = dcat[:, i * width:(i + 1) * width]
            grads[self._missing[i]] += dh[~present].sum(axis=0)
            if c is not None:
                self._level_backward(i, self.arch.steps, c, dh[present], grads)
        return grads

    def forward(self, sample: Product) -> np.ndarray:
        msg = check_schema(sample, self.schema)
        if msg:
            raise SchemaMismatch(msg)
        return self.forward_batch([sample])[0][0]

    def predict_proba(self, samples: Sequence[Product], batch_size: int = 512) -> np.ndarray:
        out = []
        for k in range(0, len(samples), batch_size):
            logits, _ = self.forward_batch(samples[k:k + batch_size])
            out.append(nn.softmax_positive(logits))
        return np.concatenate(out) if out else np.empty(0)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"HMILCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: HmilModel) -> bytes:
    names = list(model.params)
    header = {
        "format": "hmilnet-checkpoint",
        "version": FORMAT_VERSION,
        "arch": model.arch.to_dict(),
        "relations": list(model.relations),
        "feature_order": model.feature_order,
        "params": [[n, list(model.params[n].shape)] for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in names)
    blob = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + body
    return blob + hashlib.sha256(blob).digest()


def loads(blob: bytes) -> HmilModel:
    if len(blob) < len(MAGIC) + 12 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not an hmilnet checkpoint")
    version, hlen = struct.unpack_from("<IQ", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    start = len(MAGIC) + 12
    header = json.loads(payload[start:start + hlen])
    model = HmilModel(ArchitectureSpec.from_dict(header["arch"]), header["relations"],
                      feature_order=header["feature_order"])
    pos = start + hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).astype(np.float64)
        params[name] = arr.reshape(shape)
        pos += 8 * count
    if pos != len(payload):
        raise CheckpointError("checkpoint payload length mismatch")
    if set(params) != set(model._specs):
        raise CheckpointError("checkpoint parameters do not match the architecture")
    model.params = {n: params[n] for n in model._specs}
    return model


def save(model: HmilModel, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(model))
    tmp.replace(path)


def load(path: str | Path) -> HmilModel:
    return loads(Path(path).read_bytes())
