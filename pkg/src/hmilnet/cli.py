"""Command line entry point: synth, check, train, predict, evaluate, grill, ptp.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
Every command writes a JSON run manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__, config as cfgmod
from .evaluation import (grill_split, kfold_evaluate, ranking_metrics, write_csv,
                         write_eval_outputs, write_scores)
from .graph_store import IngestError, open_snapshot
from .model import ArchitectureError, CheckpointError, load, save
from .ptp import (SHARED, UNIFORM, EdgeBudgetExceeded, SingularSystem, PtpScorer, build_ptp_graph,
                  ptp_exact, ptp_iterative)
from .synth import RelationSpec, SynthConfig, generate_weeks, write_snapshot
from .training import HmilScorer, TrainConfig, TrainingError, train, write_losses

log = logging.getLogger("hmilnet")

RUNTIME_ERRORS = (IngestError, CheckpointError, ArchitectureError, TrainingError,
                  EdgeBudgetExceeded, SingularSystem, cfgmod.ConfigError, ValueError, KeyError,
                  OSError)


# ---------------------------------------------------------------- manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.exists():
                out[str(f)] = _sha256(f)
    return out


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    settings: dict
    seed: int
    inputs: dict
    outputs: list
    versions: dict
    timings: dict

    def write(self, path: Path) -> None:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
        tmp.replace(path)


def _manifest(args, settings, inputs, outputs, t0, path: Path) -> None:
    versions = {"hmilnet": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                "python": platform.python_version()}
    m = RunManifest(args.command, list(args.argv), dict(settings), int(settings["seed"]),
                    _hash_inputs(inputs), [str(o) for o in outputs], versions,
                    {"started": t0, "seconds": round(time.time() - t0, 3)})
    m.write(path)


def _file_manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------- helpers


def _settings(args) -> dict:
    overrides = {}
    for item in args.set or ():
        if "=" not in item:
            raise cfgmod.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key, attr in (("seed", "seed"), ("model.arch", "arch"), ("eval.k", "k"),
                      ("ptp.iterations", "iters"), ("ptp.weighting", "weighting")):
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    return cfgmod.resolve(args.config, overrides)


def _parse_relations(text: str) -> tuple:
    rels = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 4:
            raise cfgmod.ConfigError(f"synth.relations item {item!r}: expected name:card:entities:exp")
        rels.append(RelationSpec(parts[0], parts[1], int(parts[2]), float(parts[3])))
    return tuple(rels)


def synth_config(s: dict) -> SynthConfig:
    return SynthConfig(n_domains=int(s["synth.n_domains"]),
                       relations=_parse_relations(str(s["synth.relations"])),
                       n_campaigns=int(s["synth.n_campaigns"]),
                       campaign_size=int(s["synth.campaign_size"]),
                       campaign_entities=int(s["synth.campaign_entities"]),
                       p_in=float(s["synth.p_in"]), p_bg=float(s["synth.p_bg"]),
                       coverage=float(s["synth.coverage"]), seed=int(s["seed"]),
                       n_weeks=int(s["synth.n_weeks"]))


def _evaluate_to(out: Path, scorer, snap, k: int, seed: int, positives=None, label: str = ""):
    from .plotting import plot_pr, plot_roc

    result = kfold_evaluate(scorer, snap.collection, snap.denylist, k, seed, positives)
    if result.leak_count:
        raise RuntimeError(f"fold leakage detected ({result.leak_count} hits)")
    metrics = ranking_metrics(result.labels, result.scores)
    paths = write_eval_outputs(out, result, metrics)
    paths["pr_png"] = plot_pr(metrics, out / "pr.png", label)
    paths["roc_png"] = plot_roc(metrics, out / "roc.png", label)
    log.info("AP %.4f  AUC %.4f  (%d positives, %d benign)", metrics.ap, metrics.auc,
             int(result.labels.sum()), int((result.labels == 0).sum()))
    print(f"AP={metrics.ap:.6f} AUC={metrics.auc:.6f}")
    return list(paths.values())


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    t0 = time.time()
    s = _settings(args)
    cfg = synth_config(s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for snap in generate_weeks(cfg):
        written.append(write_snapshot(out, cfg, snap))
        log.info("wrote %s (%d domains)", written[-1], len(snap.collection.domains))
    _manifest(args, s, [args.config] if args.config else [], written, t0, out / "manifest.json")
    return 0


def cmd_check(args) -> int:
    snap = open_snapshot(args.snapshot)
    snap.collection.validate()
    coll = snap.collection
    print(f"snapshot {coll.snapshot_label}: {len(coll.domains)} domains, digest {coll.digest()[:16]}")
    for name in coll.relations:
        g = coll[name]
        print(f"  {name}\t{g.cardinality}\t{g.n_entities} entities\t{g.n_edges} edges")
    present = int(snap.denylist.mask(coll.domains).sum())
    print(f"denylist: {len(snap.denylist)} entries, {present} in snapshot, "
          f"{len(snap.denylist.not_in_snapshot)} not observed")
    return 0


def cmd_train(args) -> int:
    t0 = time.time()
    s = _settings(args)
    cfg = TrainConfig.from_settings(s, threads=args.threads)
    snaps = [open_snapshot(d) for d in args.snapshots]
    heldout = ()
    if args.holdout:
        heldout = [ln.split("\t")[0].strip() for ln in
                   Path(args.holdout).read_text(encoding="utf-8").splitlines() if ln.strip()]
    result = train(snaps, cfg, heldout)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save(result.model, out)
    loss_path = out.with_name(out.name + ".loss.csv")
    write_losses(loss_path, result.losses)
    inputs = list(args.snapshots) + ([args.config] if args.config else []) + \
        ([args.holdout] if args.holdout else [])
    _manifest(args, s, inputs, [out, loss_path], t0, _file_manifest_path(out))
    return 0


def _read_domain_list(path: str) -> list:
    return [ln.split("\t")[0].strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()
            if ln.strip()]


def cmd_predict(args) -> int:
    t0 = time.time()
    s = _settings(args)
    model = load(args.model)
    snap = open_snapshot(args.snapshot)
    coll = snap.collection
    if args.domains == "all":
        ids = np.arange(len(coll.domains))
    else:
        names = _read_domain_list(args.domains)
        unknown = [n for n in names if n not in coll.domains]
        if unknown:
            log.warning("%d requested domains are not in the snapshot and are skipped (e.g. %s)",
                        len(unknown), unknown[0])
        ids = np.array([coll.domains.index(n) for n in names if n in coll.domains], dtype=np.int64)
    scorer = HmilScorer(model, coll, int(s["sampling.k_minus"]), int(s["seed"]),
                        int(s["sampling.entity_degree_cap"]) or None, args.threads)
    scores = scorer(ids, snap.denylist.mask(coll.domains))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(out, [coll.domains.name(int(i)) for i in ids], scores)
    inputs = [args.model, args.snapshot] + ([args.domains] if args.domains != "all" else [])
    _manifest(args, s, inputs, [out], t0, _file_manifest_path(out))
    return 0


def cmd_evaluate(args) -> int:
    t0 = time.time()
    s = _settings(args)
    snap = open_snapshot(args.snapshot)
    if args.ptp_relation:
        if args.ptp_relation not in snap.collection.graphs:
            raise KeyError(f"relation {args.ptp_relation!r} not in snapshot")
        scorer = PtpScorer(snap.collection[args.ptp_relation], int(s["ptp.iterations"]),
                           str(s["ptp.weighting"]), int(s["sampling.entity_degree_cap"]) or None)
        label = f"PTP {args.ptp_relation}"
        inputs = [args.snapshot]
    else:
        model = load(args.model)
        scorer = HmilScorer(model, snap.collection, int(s["sampling.k_minus"]), int(s["seed"]),
                            int(s["sampling.entity_degree_cap"]) or None, args.threads)
        label = f"HMIL {model.arch.name}"
        inputs = [args.model, args.snapshot]
    positives = _read_domain_list(args.positives) if args.positives else None
    out = Path(args.out)
    written = _evaluate_to(out, scorer, snap, int(s["eval.k"]), int(s["seed"]), positives, label)
    _manifest(args, s, inputs + ([args.positives] if args.positives else []), written, t0,
              out / "manifest.json")
    return 0


def cmd_grill(args) -> int:
    t0 = time.time()
    s = _settings(args)
    cfg = TrainConfig.from_settings(s, threads=args.threads)
    train_snaps = [open_snapshot(d) for d in args.train]
    eval_snap = open_snapshot(args.eval)
    plan = grill_split(train_snaps[0].denylist, args.fraction, int(s["seed"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    held_path = out / "heldout.tsv"
    write_csv(held_path, ("domain", "family"),
              sorted((d, train_snaps[0].denylist.family(d)) for d in plan.heldout))
    result = train(train_snaps, cfg, plan.heldout)
    if result.heldout_central_hits or result.heldout_positive_hits:
        raise RuntimeError("held-out domains leaked into training")
    ckpt = out / "model.ckpt"
    save(result.model, ckpt)
    loss_path = out / "loss.csv"
    write_losses(loss_path, result.losses)
    scorer = HmilScorer(result.model, eval_snap.collection, cfg.k_minus, cfg.seed,
                        cfg.entity_degree_cap, args.threads)
    written = _evaluate_to(out, scorer, eval_snap, int(s["eval.k"]), int(s["seed"]),
                           plan.heldout, f"Grill {args.fraction:g}")
    _manifest(args, s, list(args.train) + [args.eval], [held_path, ckpt, loss_path] + written,
              t0, out / "manifest.json")
    return 0


def cmd_ptp(args) -> int:
    t0 = time.time()
    s = _settings(args)
    snap = open_snapshot(args.snapshot)
    coll = snap.collection
    if args.relation not in coll.graphs:
        raise KeyError(f"relation {args.relation!r} not in snapshot")
    graph = build_ptp_graph(coll[args.relation], snap.denylist.mask(coll.domains),
                            str(s["ptp.weighting"]), int(s["sampling.entity_degree_cap"]) or None)
    if args.exact:
        res = ptp_exact(graph)
    else:
        res = ptp_iterative(graph, int(s["ptp.iterations"]))
        if res.deltas:
            log.info("last update max change %.3g", res.deltas[-1])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(out, coll.domains.names, res.scores)
    _manifest(args, s, [args.snapshot], [out], t0, _file_manifest_path(out))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads; 1 gives bit-exact reruns")
    common.add_argument("--log-level", default="INFO",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    p = argparse.ArgumentParser(prog="hmilnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hmilnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[common], help="generate synthetic snapshots")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("check", parents=[common], help="validate a snapshot directory")
    sp.add_argument("--snapshot", required=True)
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("train", parents=[common], help="train a model")
    sp.add_argument("--snapshots", nargs="+", required=True)
    sp.add_argument("--arch", choices=("Mb", "Mw", "Md"))
    sp.add_argument("--holdout", help="domains to keep out of training (one per line)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", parents=[common], help="score domains of a snapshot")
    sp.add_argument("--model", required=True)
    sp.add_argument("--snapshot", required=True)
    sp.add_argument("--domains", default="all", help="file with one domain per line, or 'all'")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", parents=[common], help="K-fold denylist evaluation")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--ptp-relation", help="evaluate the PTP baseline on this relation")
    sp.add_argument("--snapshot", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--weighting", choices=(SHARED, UNIFORM))
    sp.add_argument("--positives", help="restrict evaluated positives to these domains")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("grill", parents=[common], help="train and evaluate with held-out positives")
    sp.add_argument("--fraction", type=float, required=True)
    sp.add_argument("--train", nargs="+", required=True)
    sp.add_argument("--eval", required=True)
    sp.add_argument("--arch", choices=("Mb", "Mw", "Md"))
    sp.add_argument("--k", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_grill)

    sp = sub.add_parser("ptp", parents=[common], help="threat propagation scores")
    sp.add_argument("--snapshot", required=True)
    sp.add_argument("--relation", required=True)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--weighting", choices=(SHARED, UNIFORM))
    sp.add_argument("--exact", action="store_true", help="solve the linear system instead")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ptp)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("hmilnet: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except RUNTIME_ERRORS + (RuntimeError,) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        log.error("%s", msg)
        return 1


if __name__ == "__main__":
    sys.exit(main())
