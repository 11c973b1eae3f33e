"""``herdreid`` command line.

Every subcommand reads an optional TOML run config, applies flag overrides,
writes its artifacts under ``--out`` and records a ``run_meta.json``.
Exit codes: 0 success, 1 computational failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .embedder import TrainConfig, TrainingDivergedError, embed, load_model, save_model, train
from .ingest import (
    IngestError,
    SampleSet,
    load_annotations,
    load_detections,
    load_manifest,
    sample_once_per_second,
    save_detections,
)
from .loceval import GEOMETRIES, GeometryModeError, LocThresholds, evaluate
from .pipeline import samples_from_annotations, samples_from_detections
from .refine import RefineConfig, refine
from .reideval import (
    METRICS,
    ProtocolError,
    ari,
    ami,
    hungarian_accuracy,
    kmeans,
    knn_classify,
    make_fold_plan,
    nmi,
    pca_project_2d,
    run_protocol,
)
from .report import (
    plot_fold_metrics,
    plot_frame_series,
    plot_losses,
    plot_projection,
    read_csv,
    write_csv,
)
from .synth import CorpusSpec, CorruptionSpec, SynthError, corrupt, gen_corpus, write_corpus

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("herdreid")

COMMANDS = ("synth", "refine", "build-masks", "loceval", "train", "reideval", "crossval", "report")
SECTIONS = ("paths", "synth", "corruption", "refine", "ingest", "loceval", "train", "reideval")
PATH_KEYS = ("manifest", "detections", "annotations", "samples", "model")


class UsageError(Exception):
    """Bad flags, config or missing inputs (exit 2)."""


# ------------------------------------------------------------------ config


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config not found: {p}")
    try:
        cfg = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"{p}: {e}") from None
    unknown = set(cfg) - set(SECTIONS) - {"seed", "out"}
    if unknown:
        raise UsageError(f"{p}: unknown config sections {sorted(unknown)}")
    return cfg


def sub_seed(seed: int, name: str) -> int:
    """Per-module seed derived from the global one."""
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(name.encode())]).generate_state(1)[0])


def resolve(args) -> dict:
    cfg = load_config(args.config)
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in cfg.items()}
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    if not isinstance(cfg["seed"], int):
        raise UsageError("seed must be an integer")
    if args.out is not None:
        cfg["out"] = args.out
    cfg.setdefault("out", "out")
    paths = cfg.setdefault("paths", {})
    for k in PATH_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            paths[k] = v
    for key, value in getattr(args, "set", None) or []:
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name:
            raise UsageError(f"--set key must look like section.name, got {key!r}")
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
        cfg.setdefault(sec, {})[name] = value
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the resolved config; the output directory is not part of it."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()


def write_meta(out: Path, command: str, cfg: dict, extra: Optional[dict] = None):
    import matplotlib
    import scipy

    meta = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "versions": {
            "herdreid": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__,
        },
    }
    if extra:
        meta.update(extra)
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def _path(cfg: dict, key: str, required: bool = True) -> Optional[Path]:
    v = cfg.get("paths", {}).get(key)
    if v is None:
        if required:
            raise UsageError(f"no {key} path given (use --{key} or [paths].{key})")
        return None
    p = Path(v)
    if not p.exists():
        raise UsageError(f"{key} not found: {p}")
    return p


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise UsageError(f"[{name}] must be a table")
    return dict(sec)


def _build(factory, d: dict, what: str):
    try:
        return factory(d)
    except TypeError as e:
        raise UsageError(f"[{what}]: {e}") from None
    except ValueError as e:
        raise UsageError(f"[{what}]: {e}") from None


def _train_config(cfg: dict) -> TrainConfig:
    d = _section(cfg, "train")
    d.setdefault("seed", sub_seed(cfg["seed"], "train"))
    return _build(TrainConfig.from_dict, d, "train")


# ------------------------------------------------------------------ commands


def cmd_synth(cfg: dict, out: Path) -> dict:
    d = _section(cfg, "synth")
    d.setdefault("seed", sub_seed(cfg["seed"], "synth"))
    spec = _build(CorpusSpec.from_dict, d, "synth")
    corpus = gen_corpus(spec)
    dets = None
    cd = _section(cfg, "corruption")
    if cd:
        cseed = cd.pop("seed", sub_seed(cfg["seed"], "corruption"))
        dets = corrupt(corpus.annotations, _build(CorruptionSpec.from_dict, cd, "corruption"), cseed)
    write_corpus(corpus, out, dets)
    n_inst = sum(len(v) for v in corpus.annotations.values())
    print(f"synth: {spec.n_days} day(s), {len(corpus.manifest.frames)} frames, {n_inst} instances -> {out}")
    return {"frames": len(corpus.manifest.frames), "instances": n_inst}


def cmd_refine(cfg: dict, out: Path) -> dict:
    manifest = load_manifest(_path(cfg, "manifest"))
    dets = load_detections(_path(cfg, "detections"), manifest)
    rc = _build(RefineConfig.from_dict, _section(cfg, "refine"), "refine")
    kept, total = {}, 0
    for fid in sorted(dets):
        f = manifest.frame(fid)
        kept[fid] = refine(dets[fid], f.width, f.height, rc)
        total += len(dets[fid])
    n_kept = sum(len(v) for v in kept.values())
    save_detections(kept, out / "detections.jsonl", manifest)
    print(f"refine: kept {n_kept}, dropped {total - n_kept}")
    return {"kept": n_kept, "dropped": total - n_kept}


def _thresholds(cfg: dict) -> tuple:
    d = _section(cfg, "loceval")
    geoms = d.pop("geometries", ["obb", "mask"])
    use_tracks = bool(d.pop("use_tracks", False))
    if isinstance(geoms, str):
        geoms = [geoms]
    bad = [g for g in geoms if g not in GEOMETRIES]
    if bad:
        raise UsageError(f"[loceval] unknown geometries {bad}")
    return _build(lambda x: LocThresholds(**x), d, "loceval"), list(geoms), use_tracks


def cmd_loceval(cfg: dict, out: Path) -> dict:
    manifest = load_manifest(_path(cfg, "manifest"))
    anns = load_annotations(_path(cfg, "annotations"), manifest)
    dets = load_detections(_path(cfg, "detections"), manifest)
    thr, geoms, use_tracks = _thresholds(cfg)
    frame_ids = list(manifest.frames)
    summary_rows, frame_rows, ind_rows, series = [], [], [], {}
    for g in geoms:
        rep = evaluate(anns, dets, g, thr, frame_ids, use_tracks)
        for k, v in rep.summary().items():
            summary_rows.append((g, k, v))
        series[g] = [(s.frame_id, s.mean_iou, s.usage_rate) for s in rep.per_frame]
        frame_rows += [(g, *r) for r in series[g]]
        ind_rows += [(g, ident, v) for ident, v in sorted(rep.per_individual.items())]
        print(f"loceval[{g}]: iou {rep.mean_iou} tp {rep.tp_accuracy} usage {rep.usage_rate} "
              f"matching {rep.matching_rate}")
    write_csv(out / "loc_metrics.csv", ("geometry", "metric", "value"), summary_rows)
    write_csv(out / "loc_per_frame.csv", ("geometry", "frame_id", "mean_iou", "usage_rate"), frame_rows)
    write_csv(out / "loc_per_individual.csv", ("geometry", "identity", "mean_iou"), ind_rows)
    plot_frame_series(series, out / "loc_series.svg", thr.well_detected)
    return {}


def cmd_build_masks(cfg: dict, out: Path) -> dict:
    d = _section(cfg, "ingest")
    resolution = int(d.get("resolution", 128))
    source = d.get("source", "annotations")
    once = bool(d.get("once_per_second", True))
    manifest = load_manifest(_path(cfg, "manifest"))
    frames = [f for day in manifest.days for f in (sample_once_per_second(day.frames) if once else day.frames)]
    keep = {f.frame_id for f in frames}
    if source == "annotations":
        anns = load_annotations(_path(cfg, "annotations"), manifest)
        anns = {f: v for f, v in anns.items() if f in keep}
        samples = samples_from_annotations(manifest, anns, resolution)
    elif source == "detections":
        dets = load_detections(_path(cfg, "detections"), manifest)
        dets = {f: v for f, v in dets.items() if f in keep}
        ap = _path(cfg, "annotations", required=False)
        anns = load_annotations(ap, manifest) if ap is not None else None
        samples = samples_from_detections(manifest, dets, anns, resolution)
    else:
        raise UsageError("[ingest].source must be 'annotations' or 'detections'")
    samples.save(out / "samples.npz")
    print(f"build-masks: {len(samples)} samples ({len(samples.labelled())} labelled) from {len(keep)} frames")
    return {"samples": len(samples)}


def _load_samples(cfg: dict) -> SampleSet:
    return SampleSet.load(_path(cfg, "samples"))


def cmd_train(cfg: dict, out: Path) -> dict:
    samples = _load_samples(cfg)
    tc = _train_config(cfg)
    res = train(samples, tc)
    save_model(res.model, out / "model.npz")
    write_csv(out / "losses.csv", ("epoch", "loss"), enumerate(res.losses))
    plot_losses({"train": res.losses}, out / "losses.svg")
    if res.losses:
        print(f"train: {tc.epochs} epochs, loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")
    return {"epochs": tc.epochs}


def _reid_opts(cfg: dict, default_mode: str) -> dict:
    d = _section(cfg, "reideval")
    opts = {
        "mode": d.pop("mode", default_mode),
        "k_nn": int(d.pop("k_nn", 5)),
        "restarts": int(d.pop("restarts", 10)),
        "day": d.pop("day", None),
        "folds_k": int(d.pop("folds_k", 5)),
        "workers": int(d.pop("workers", 1)),
    }
    if d:
        raise UsageError(f"[reideval] unknown keys {sorted(d)}")
    return opts


def _write_embeddings(path: Path, emb, fold: Optional[str] = None):
    header = (["fold"] if fold is not None else []) + ["sample_id", "label"] + \
        [f"e{k}" for k in range(emb.vectors.shape[1])]
    rows = [([fold] if fold is not None else []) + [sid, lab] + list(map(float, v))
            for sid, lab, v in zip(emb.sample_ids.tolist(), emb.labels.tolist(), emb.vectors)]
    write_csv(path, header, rows)


def cmd_reideval(cfg: dict, out: Path) -> dict:
    """Score a trained model on one split of the samples (no retraining)."""
    samples = _load_samples(cfg)
    model = load_model(_path(cfg, "model"))
    o = _reid_opts(cfg, "single_day")
    plan = make_fold_plan(samples, o["mode"], seed=sub_seed(cfg["seed"], "folds"), k=o["folds_k"], day=o["day"])
    fold = plan.folds[0]
    pos = {s: i for i, s in enumerate(samples.sample_ids.tolist())}
    gal = samples.subset([pos[s] for s in fold.train])
    gal = gal.subset(gal.labelled())
    tst = samples.subset([pos[s] for s in fold.test])
    tst = tst.subset(tst.labelled())
    ids = sorted(set(tst.identities.tolist()))
    if len(ids) < 2:
        raise ProtocolError(f"test split of {fold.name} has {len(ids)} identities, need 2")
    g, q = embed(model, gal), embed(model, tst)
    _, acc = knn_classify(g.vectors, g.labels, q.vectors, min(o["k_nn"], len(g)), q.labels)
    km = kmeans(q.vectors, len(ids), seed=sub_seed(cfg["seed"], "kmeans"), restarts=o["restarts"])
    vals = {"knn_accuracy": acc, "ari": ari(q.labels, km.labels), "ami": ami(q.labels, km.labels),
            "nmi": nmi(q.labels, km.labels), "ha_accuracy": hungarian_accuracy(q.labels, km.labels)}
    write_csv(out / "reid_report.csv", ("fold", "metric", "value"), [(fold.name, m, vals[m]) for m in METRICS])
    _write_embeddings(out / "embeddings.csv", q)
    plot_projection(pca_project_2d(q.vectors), q.labels, km.labels, out / "projection.svg")
    print("reideval: " + ", ".join(f"{m} {vals[m]:.4f}" for m in METRICS))
    return {}


def cmd_crossval(cfg: dict, out: Path) -> dict:
    samples = _load_samples(cfg)
    o = _reid_opts(cfg, "day_wise_k9")
    plan = make_fold_plan(samples, o["mode"], seed=sub_seed(cfg["seed"], "folds"), k=o["folds_k"], day=o["day"])
    rep = run_protocol(samples, plan, _train_config(cfg), o["k_nn"], o["restarts"], o["workers"],
                       keep_embeddings=True)
    rows = [(f.fold, m, getattr(f, m)) for f in rep.folds for m in METRICS]
    rows += [("mean", m, rep.aggregate[m][0]) for m in METRICS]
    rows += [("std", m, rep.aggregate[m][1]) for m in METRICS]
    write_csv(out / "reid_report.csv", ("fold", "metric", "value"), rows)
    write_csv(out / "losses.csv", ("fold", "epoch", "loss"),
              [(f.fold, e, v) for f in rep.folds for e, v in enumerate(f.losses)])
    emb_rows = []
    for f in rep.folds:
        q, _ = rep.embeddings[f.fold]
        emb_rows += [[f.fold, sid, lab, *map(float, v)]
                     for sid, lab, v in zip(q.sample_ids.tolist(), q.labels.tolist(), q.vectors)]
    dim = rep.embeddings[rep.folds[0].fold][0].vectors.shape[1]
    write_csv(out / "embeddings.csv", ["fold", "sample_id", "label"] + [f"e{k}" for k in range(dim)], emb_rows)
    q, km = rep.embeddings[rep.folds[0].fold]
    plot_projection(pca_project_2d(q.vectors), q.labels, km, out / "projection.svg")
    plot_losses({f.fold: f.losses for f in rep.folds}, out / "losses.svg")
    plot_fold_metrics(read_csv(out / "reid_report.csv"), out / "folds.svg")
    for f in rep.folds:
        print(f"crossval[{f.fold}]: " + ", ".join(f"{m} {getattr(f, m):.4f}" for m in METRICS))
    print("crossval[aggregate]: " + ", ".join(f"{m} {a:.4f}±{s:.4f}" for m, (a, s) in rep.aggregate.items()))
    return {"folds": len(rep.folds)}


def cmd_report(cfg: dict, out: Path) -> dict:
    """Re-render figures from the CSVs already present under ``--out``."""
    made = []
    if (out / "loc_per_frame.csv").exists():
        series: dict = {}
        for r in read_csv(out / "loc_per_frame.csv"):
            series.setdefault(r["geometry"], []).append((r["frame_id"], r["mean_iou"], r["usage_rate"]))
        made.append(plot_frame_series(series, out / "loc_series.svg"))
    if (out / "losses.csv").exists():
        curves: dict = {}
        for r in read_csv(out / "losses.csv"):
            curves.setdefault(r.get("fold", "train"), []).append(float(r["loss"]))
        made.append(plot_losses(curves, out / "losses.svg"))
    if (out / "reid_report.csv").exists():
        rows = read_csv(out / "reid_report.csv")
        made.append(plot_fold_metrics(rows, out / "folds.svg"))
    if (out / "embeddings.csv").exists():
        rows = read_csv(out / "embeddings.csv")
        first = rows[0].get("fold") if rows else None
        rows = [r for r in rows if r.get("fold") == first]
        cols = [c for c in (rows[0] if rows else {}) if c.startswith("e") and c[1:].isdigit()]
        if len(rows) >= 2:
            X = np.array([[float(r[c]) for c in cols] for r in rows])
            made.append(plot_projection(pca_project_2d(X), [r["label"] for r in rows], None,
                                        out / "projection_identity.svg"))
    if not made:
        raise UsageError(f"no report CSVs found under {out}")
    for p in made:
        print(f"report: wrote {p}")
    return {"figures": len(made)}


HANDLERS = {
    "synth": cmd_synth,
    "refine": cmd_refine,
    "build-masks": cmd_build_masks,
    "loceval": cmd_loceval,
    "train": cmd_train,
    "reideval": cmd_reideval,
    "crossval": cmd_crossval,
    "report": cmd_report,
}


HELP = {
    "synth": "generate a synthetic herd corpus (frames, manifest, annotations, detections)",
    "refine": "size-filter and NMS raw detections",
    "build-masks": "cut RGB-mask samples from annotations or detections",
    "loceval": "localisation metrics of detections against ground truth",
    "train": "train the contrastive embedder on RGB-mask samples",
    "reideval": "score a trained embedder on one split",
    "crossval": "retrain and score per fold (within-day or day-wise)",
    "report": "re-render figures from existing CSVs",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="herdreid", description="Crowd-robust cattle Re-ID evaluation toolkit.")
    p.add_argument("--version", action="version", version=f"herdreid {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", help="TOML run config")
        sp.add_argument("--seed", type=int, help="global seed (overrides config)")
        sp.add_argument("--out", help="output directory (default: out)")
        for k in PATH_KEYS:
            sp.add_argument(f"--{k}", help=f"{k} path (overrides [paths].{k})")
        sp.add_argument("--set", nargs=2, action="append", metavar=("SECTION.KEY", "VALUE"),
                        help="override one config value; VALUE is parsed as JSON when possible")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        extra = HANDLERS[args.command](cfg, out)
        write_meta(out, args.command, cfg, {"result": extra} if extra else None)
        return 0
    except UsageError as e:
        print(f"herdreid {args.command}: {e}", file=sys.stderr)
        return 2
    except (SynthError, GeometryModeError) as e:
        print(f"herdreid {args.command}: {e}", file=sys.stderr)
        return 2 if isinstance(e, SynthError) else 1
    except (IngestError, ProtocolError, TrainingDivergedError, FloatingPointError) as e:
        print(f"herdreid {args.command}: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as e:
        print(f"herdreid {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
