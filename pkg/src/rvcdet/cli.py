"""``rvc`` command-line entry point.

Machine-readable results go to stdout or files; log lines go to stderr.
Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path


from . import bench as benchmod
from ._parallel import n_threads, ordered_map
from .cloudio import (
    CLASS_NAMES,
    load_cloud,
    read_detections,
    read_scene,
    synth_scene,
    write_detections,
    write_scene,
)
from .config import ExperimentConfig
from .errors import ConfigError, DataError, GenerationError, RvcError
from .evaluation import filter_by_points, filter_by_score, format_table, match, precision_report, table_csv
from .fdv import FEATURE_NAMES, assign_pillars, fdv_features, pillar_table
from .subhead import (
    LABEL_NAMES,
    SubheadModel,
    build_crop_dataset,
    load_crops,
    param_count,
    refine,
    save_crops,
    scene_detections,
    scene_heatmap,
    train_subhead,
)

log = logging.getLogger("rvc")

TRAIN_STREAM = 1  # scene seed stream for classifier training, disjoint from `synth` output


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text):
    return tuple(int(float(x)) for x in _floats(text))


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, val = item.split("=", 1)
        cfg = cfg.with_value(key.strip(), val)
    overrides = {
        "seed": ("synth.seed", "detections.seed", "heatmap.seed", "train.seed", "backbone.seed"),
        "range": ("grid.range",),
        "voxel": ("grid.voxel",),
        "epochs": ("train.epochs",),
        "lr": ("train.lr",),
        "per_class": ("train.per_class",),
        "train_scenes": ("train.train_scenes",),
        "n_scenes": ("synth.n_scenes",),
        "kinds": ("classifier.kinds",),
        "ks": ("classifier.ks",),
        "point_threshold": ("eval.point_threshold",),
        "score_threshold": ("eval.score_threshold",),
    }
    for attr, keys in overrides.items():
        val = getattr(args, attr, None)
        if val is None:
            continue
        raw = ",".join(map(str, val)) if isinstance(val, (tuple, list)) else str(val)
        for k in keys:
            cfg = cfg.with_value(k, raw)
    if getattr(args, "out", None):
        cfg = cfg.with_value("output.dir", args.out)
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.output.dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- synth -------------------------------------------------------------------

def cmd_synth(args):
    cfg = _load_config(args)
    out = _out_dir(cfg)
    sim = cfg.detection_sim()

    def one(i):
        scene = synth_scene(cfg.scene_config(i))
        return scene, scene_detections(scene, sim)

    results = ordered_map(one, range(cfg.synth.n_scenes))
    n_box = n_pts = n_det = n_fp = 0
    for i, (scene, dets) in enumerate(results):
        write_scene(scene, out / f"scene_{i:04d}.txt")
        write_detections(dets, out / f"dets_{i:04d}.txt")
        n_box += len(scene.gt)
        n_pts += len(scene.cloud)
        n_det += len(dets)
        n_fp += sum(1 for d in dets if d.tp is False)
    cfg.save(out / "config.ini")
    if args.figures and results:
        from .plotting import plot_scene

        scene, dets = results[0]
        grid = cfg.make_grid()
        hm = scene_heatmap(scene, dets, match(dets, scene.gt), grid, cfg.heatmap_sim())
        plot_scene(scene, dets, out / "scene_0000.png", hm, grid)
    log.info("wrote %d scenes to %s", len(results), out)
    _emit({"scenes": len(results), "boxes": n_box, "points": n_pts, "detections": n_det, "false_positives": n_fp})
    return 0


# -- voxelize ----------------------------------------------------------------

def cmd_voxelize(args):
    cfg = _load_config(args)
    grid = cfg.make_grid()
    cloud = load_cloud(args.input)
    t0 = time.perf_counter()
    assignment = assign_pillars(cloud, grid)
    t1 = time.perf_counter()
    feats = fdv_features(cloud, assignment, grid)
    t2 = time.perf_counter()
    table = pillar_table(cloud, assignment)
    header = ["batch", "row", "col", "count", "mean_x", "mean_y", "mean_z"]
    cols = [0, 1, 2, 4, 5, 6, 7]
    if not grid.pillar_mode:
        header.insert(3, "layer")
        cols.insert(3, 3)
    rows = [
        [int(r[0]), int(r[1]), int(r[2]), *([int(r[3])] if not grid.pillar_mode else []), int(r[4]),
         repr(float(r[5])), repr(float(r[6])), repr(float(r[7]))]
        for r in table
    ]
    out = _out_dir(cfg)
    _write_csv(out / "pillars.csv", header, rows)
    if args.features:
        _write_csv(out / "features.csv", ["point", *FEATURE_NAMES],
                   [[int(i), *map(repr, f.tolist())] for i, f in zip(assignment.point_index, feats)])
    n_in = len(cloud)
    stats = {
        "points_in": n_in,
        "points_skipped": n_in - assignment.n_kept,
        "pillars": assignment.pillar_count,
        "max_occupancy": int(assignment.counts.max()) if assignment.pillar_count else 0,
        "grid_size": list(grid.grid_size),
        "timing": {"assign_s": t1 - t0, "features_s": t2 - t1},
    }
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, sort_keys=True, indent=1)
    _emit(stats)
    return 0


# -- train-subhead -----------------------------------------------------------

RECALL_COLS = [f"recall_{n.lower().replace(' ', '_')}" for n in LABEL_NAMES]


def cmd_train_subhead(args):
    cfg = _load_config(args)
    out = _out_dir(cfg)
    cells = cfg.classifier_specs()
    if args.dataset:
        dataset = load_crops(args.dataset)
        log.info("loaded %d crops from %s", len(dataset), args.dataset)
    else:
        scenes = ordered_map(lambda i: synth_scene(cfg.scene_config(i, TRAIN_STREAM)), range(cfg.train.train_scenes))
        dataset, counts = build_crop_dataset(scenes, cfg.detection_sim(), cfg.make_grid(), cfg.crop_config())
        log.info("crop dataset: %s", dict(zip(LABEL_NAMES, counts.tolist())))
    if args.save_dataset:
        save_crops(dataset, out / "crops.bin")
    if cfg.classifier.out_dim == 2:
        dataset = dataset.relabel_binary()

    long_rows, histories, best = [], {}, None
    for kind, k, spec in cells:
        if spec is None:
            log.info("skipping %s at %dx%d: convolutional variants need k >= 3", kind, k, k)
            continue
        log.info("training %s on %dx%d crops", kind, k, k)
        res = train_subhead(dataset, spec, cfg.train_config())
        tag = f"{kind}_k{k}"
        res.model.save(out / f"subhead_{tag}.ckpt")
        _write_csv(out / f"history_{tag}.csv", ["epoch", "train_loss", "val_loss", "val_accuracy", *RECALL_COLS[:spec.out_dim]],
                   [[h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.val_accuracy),
                     *("" if r is None else repr(r) for r in h.recall)] for h in res.history])
        fin = res.final
        recall = list(fin.recall) + [None] * (len(RECALL_COLS) - len(fin.recall))
        long_rows.append([kind, k, param_count(spec), repr(fin.val_accuracy), *("" if r is None else repr(r) for r in recall)])
        histories[f"{kind} {k}x{k}"] = [(h.epoch, h.val_accuracy) for h in res.history]
        if best is None or fin.val_accuracy > best[2]:
            best = (kind, k, fin.val_accuracy, tag)
    _write_csv(out / "ablation.csv", ["kind", "k", "params", "val_accuracy", *RECALL_COLS], long_rows)

    ks = list(dict.fromkeys(k for _, k, _ in cells))
    acc = {(r[0], r[1]): r[3] for r in long_rows}
    wide = [[kind, *(f"{100 * float(acc[(kind, k)]):.2f}" if (kind, k) in acc else "-" for k in ks)]
            for kind in dict.fromkeys(kind for kind, _, _ in cells)]
    _write_csv(out / "ablation_table.csv", ["architecture", *(f"{k}x{k} input" for k in ks)], wide)

    if best is None:
        raise ConfigError("no valid (kind, k) cell in the ablation grid")
    (out / "best.ckpt").write_bytes((out / f"subhead_{best[3]}.ckpt").read_bytes())
    cfg.save(out / "config.ini")
    if args.figures:
        from .plotting import plot_ablation_grid, plot_training_curves

        plot_ablation_grid(_read_csv(out / "ablation.csv"), out / "ablation.png")
        plot_training_curves(histories, out / "training_curves.png")
    _emit({"cells": len(long_rows), "best": {"kind": best[0], "k": best[1], "val_accuracy": best[2]},
           "checkpoint": str(out / "best.ckpt")})
    return 0


# -- eval --------------------------------------------------------------------

def _scene_pairs(scene_dir: Path, det_dir: Path):
    scenes = sorted(scene_dir.glob("scene_*.txt"))
    if not scenes:
        raise DataError(f"no scene_*.txt files in {scene_dir}")
    pairs = []
    for s in scenes:
        d = det_dir / s.name.replace("scene_", "dets_")
        if not d.exists():
            raise DataError(f"missing detections file {d}")
        pairs.append((s, d))
    return pairs


def evaluate_dir(cfg, scene_dir, det_dir, model=None):
    """Precision reports for raw / point-filter / score-filter / [sub-head] pipelines."""
    grid = cfg.make_grid()
    ev = cfg.eval
    thr = ev.iou_threshold

    def one(pair):
        scene = read_scene(pair[0])
        dets = read_detections(pair[1])
        res = match(dets, scene.gt, thr)
        variants = {
            "raw": dets,
            "points": filter_by_points(dets, scene.cloud, ev.point_threshold),
            "score": filter_by_score(dets, ev.score_threshold),
        }
        unclassified = 0
        if model is not None:
            hm = scene_heatmap(scene, dets, res, grid, cfg.heatmap_sim())
            refined = refine(dets, hm, model, grid)
            variants["subhead"] = refined.kept
            unclassified = len(refined.unclassified)
        return {k: match(v, scene.gt, thr) for k, v in variants.items()}, unclassified

    per_scene = ordered_map(one, _scene_pairs(Path(scene_dir), Path(det_dir)))
    names = {
        "raw": "Detector (raw)",
        "points": f"+ Point Filtering (Threshold {ev.point_threshold})",
        "score": f"+ Score Filtering (Threshold {ev.score_threshold})",
    }
    if model is not None:
        names["subhead"] = f"+ Sub-head ({model.spec.kind}, {model.spec.k}x{model.spec.k})"
    rows = [(names[key], precision_report(r[key] for r, _ in per_scene)) for key in names]
    return rows, sum(u for _, u in per_scene), len(per_scene)


def cmd_eval(args):
    cfg = _load_config(args)
    model = None
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise ConfigError(f"checkpoint {args.checkpoint} not found; refinement needs a trained sub-head")
        model = SubheadModel.load(args.checkpoint)
    scene_dir = Path(args.scenes)
    rows, unclassified, n_scenes = evaluate_dir(cfg, scene_dir, Path(args.dets) if args.dets else scene_dir, model)
    out = _out_dir(cfg)
    ev = cfg.eval
    header = [
        f"# IoU threshold: {ev.iou_threshold}",
        f"# point filter threshold: {ev.point_threshold}",
        f"# score filter threshold: {ev.score_threshold}",
        f"# scenes: {n_scenes}; unclassified detections (outside grid): {unclassified}",
    ]
    text = format_table(rows, title="Precision by pipeline", header_lines=header)
    (out / "precision.txt").write_text(text, encoding="utf-8")
    (out / "precision.csv").write_text("\n".join(header) + "\n" + table_csv(rows), encoding="utf-8")
    if args.figures:
        from .plotting import plot_precision

        plot_precision(_precision_dicts(rows), out / "precision.png")
    sys.stdout.write(text)
    return 0


def _precision_dicts(rows):
    return [{"pipeline": name, "Overall": rep.precision,
             **{CLASS_NAMES[c]: rep.per_class[c].precision for c in range(len(CLASS_NAMES))}} for name, rep in rows]


# -- bench -------------------------------------------------------------------

def cmd_bench(args):
    sizes = [int(s) for s in args.sizes]
    if sizes != sorted(sizes):
        raise ConfigError("--sizes must be ascending")
    rows = benchmod.run_bench(sizes, repeats=args.repeats, stages=args.stages, seed=args.seed)
    summary = benchmod.summarize(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "bench.csv", ["stage", "n", "median_s", "ns_per_point"],
                   [[r["stage"], r["n"], repr(r["median_s"]), repr(r["ns_per_point"])] for r in rows])
        with open(out / "bench_summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, sort_keys=True, indent=1)
        if args.figures:
            from .plotting import plot_bench

            plot_bench(rows, out / "bench.png")
    for st, info in summary.items():
        log.info("%s: R^2=%s ratio_4x=%s", st, info.get("r2"), info.get("ratio_4x"))
    _emit({"threads": n_threads(), "rows": rows, "summary": summary})
    return 0


# -- report ------------------------------------------------------------------

def cmd_report(args):
    src = Path(args.input)
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    from . import plotting

    made = []
    if (src / "ablation.csv").exists():
        rows = _read_csv(src / "ablation.csv")
        made.append(plotting.plot_ablation_grid(rows, out / "ablation.png"))
        hist = {}
        for p in sorted(src.glob("history_*.csv")):
            h = _read_csv(p)
            hist[p.stem[len("history_"):]] = [(int(r["epoch"]), float(r["val_accuracy"])) for r in h]
        if hist:
            made.append(plotting.plot_training_curves(hist, out / "training_curves.png"))
        if (src / "ablation_table.csv").exists():
            sys.stdout.write((src / "ablation_table.csv").read_text(encoding="utf-8"))
    if (src / "precision.csv").exists():
        lines = [ln for ln in (src / "precision.csv").read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
        rows = list(csv.DictReader(lines))

        def val(r, key):
            return float(r[key]) if r[key] else None

        prec = [{"pipeline": r["pipeline"], "Overall": val(r, "overall_precision"),
                 **{n: val(r, f"{n.lower()}_precision") for n in CLASS_NAMES}} for r in rows]
        made.append(plotting.plot_precision(prec, out / "precision.png"))
        if (src / "precision.txt").exists():
            sys.stdout.write((src / "precision.txt").read_text(encoding="utf-8"))
    if (src / "bench.csv").exists():
        made.append(plotting.plot_bench(_read_csv(src / "bench.csv"), out / "bench.png"))
    if not made:
        raise DataError(f"nothing to report in {src}: expected ablation.csv, precision.csv or bench.csv")
    for p in made:
        log.info("wrote %s", p)
    return 0


# -- entry point -------------------------------------------------------------

def build_parser():
    p = _Parser(prog="rvc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int, help="set every seed in the config")
        if out:
            sp.add_argument("--out", help="output directory (output.dir)")

    s = sub.add_parser("synth", help="generate synthetic scenes and detections")
    common(s)
    s.add_argument("--n-scenes", dest="n_scenes", type=int)
    s.add_argument("--figures", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("voxelize", help="dynamic pillar voxelization of a point cloud file")
    common(s)
    s.add_argument("input", help=".bin (KITTI), .csv, or rvc-scene text file")
    s.add_argument("--range", type=_floats, help="xmin,ymin,zmin,xmax,ymax,zmax")
    s.add_argument("--voxel", type=_floats, help="vx,vy (pillars) or vx,vy,vz")
    s.add_argument("--features", action="store_true", help="also write per-point features.csv")
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("train-subhead", help="build the crop dataset and train classifier(s)")
    common(s)
    s.add_argument("--kinds", type=lambda t: tuple(x.strip() for x in t.split(",") if x.strip()))
    s.add_argument("--ks", type=_ints)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--per-class", dest="per_class", type=int)
    s.add_argument("--train-scenes", dest="train_scenes", type=int)
    s.add_argument("--dataset", help="use an existing rvc-crops v1 file")
    s.add_argument("--save-dataset", action="store_true")
    s.add_argument("--figures", action="store_true")
    s.set_defaults(func=cmd_train_subhead)

    s = sub.add_parser("eval", help="precision of raw, filtered and refined detections")
    common(s)
    s.add_argument("--scenes", required=True)
    s.add_argument("--dets", help="directory of dets_*.txt (default: --scenes)")
    s.add_argument("--checkpoint", help="sub-head checkpoint; enables refinement")
    s.add_argument("--point-threshold", dest="point_threshold", type=int)
    s.add_argument("--score-threshold", dest="score_threshold", type=float)
    s.add_argument("--figures", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time voxelizer stages over point counts")
    s.add_argument("--sizes", type=_ints, default=(100_000, 400_000))
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--stages", type=lambda t: tuple(t.split(",")), default=benchmod.STAGES)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--figures", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", help="render figures from CSV outputs")
    s.add_argument("input", help="directory holding ablation.csv / precision.csv / bench.csv")
    s.add_argument("--out", help="figure directory (default: input)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    # bind to the current stderr on every call so repeated in-process runs log correctly
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.propagate = False
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, argparse.ArgumentTypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            log.error("%s", exc)
            return 2
        log.error("%s", exc)
        return 1
    except (DataError, GenerationError) as exc:
        log.error("%s", exc)
        return 2
    except RvcError as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
