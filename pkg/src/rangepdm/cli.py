"""``rangepdm`` command line.

Every subcommand reads a sensor (``--preset`` or explicit sizes), is seeded by
``--seed`` and can take a JSON ``--config`` whose keys are flag names
(dashes or underscores); explicit flags win over the file. Results go to
stdout as JSON. Exit codes: 1 usage, 2 bad data or file format, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from rangepdm import __version__, metrics, pdm, rknn, synth, vrcrop
from rangepdm.cloud_io import (
    PointCloud,
    SensorSpec,
    assign_rings,
    read_kitti_bin,
    read_kitti_label,
    write_kitti_label,
)
from rangepdm.errors import DataError, FormatError, NumericalError
from rangepdm.nn.checkpoint import load_checkpoint, save_checkpoint
from rangepdm.presets import (
    NUSCENES_CLASSES,
    RARE_CLASS_PRESETS,
    SEMANTIC_KITTI_CLASSES,
    SEMANTIC_POSS_CLASSES,
    SENSOR_PRESETS,
    remap_semantic_kitti,
)
from rangepdm.projection import (
    dropped_mask,
    pixel_labels,
    project,
    reproject_labels,
    save_range_image,
    save_range_png,
)

log = logging.getLogger("rangepdm")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

SYNTH_CLASSES = ["unlabeled", "ground", "building", "car", "pole"]
SYNTH_TWO_CLASSES = ["unlabeled", "background", "object"]
CLASS_TABLES = {
    "semantic-kitti": SEMANTIC_KITTI_CLASSES,
    "semantic-poss": SEMANTIC_POSS_CLASSES,
    "nuscenes": NUSCENES_CLASSES,
    "synth": SYNTH_CLASSES,
    "synth-two-class": SYNTH_TWO_CLASSES,
}
# default class table per sensor preset, used when --classes is not given
PRESET_CLASSES = {
    "semantic-kitti-64x2048": "semantic-kitti",
    "semantic-poss-40x1800": "semantic-poss",
    "nuscenes-32x1088": "nuscenes",
}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _window(value) -> tuple:
    if isinstance(value, (list, tuple)):
        parts = [int(x) for x in value]
    elif isinstance(value, int):
        parts = [value]
    else:
        parts = [int(x) for x in str(value).lower().split("x")]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 1 or parts[0] % 2 == 0 or parts[1] % 2 == 0:
        raise argparse.ArgumentTypeError(f"window must be odd, e.g. 5 or 5x5: {value!r}")
    return tuple(parts)


def _sensor(args) -> SensorSpec:
    base = SENSOR_PRESETS[args.preset]
    h = args.height or base.height
    w = args.width or base.width
    wv = args.virtual_width or (base.virtual_width if not (args.height or args.width) else w)
    return SensorSpec(h, w, max(wv, w))


def _class_names(args, n_min: int = 0) -> Optional[list]:
    key = args.classes or PRESET_CLASSES.get(args.preset)
    names = list(CLASS_TABLES[key]) if key else None
    if names and n_min > len(names):
        raise DataError(f"labels go up to {n_min - 1} but class table {key!r} has {len(names)} entries")
    return names


def _sidecar(path: Path, ext: str, subdir: str) -> Optional[Path]:
    """``scan.label`` next to ``scan.bin`` or ``../labels/scan.label``."""
    for cand in (path.with_suffix(ext), path.parent.parent / subdir / (path.stem + ext)):
        if cand.exists():
            return cand
    return None


def _expand_scans(items) -> list:
    out = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            sub = p / "velodyne" if (p / "velodyne").is_dir() else p
            found = sorted(sub.glob("*.bin"))
            if not found:
                raise DataError(f"no .bin scans under {p}")
            out.extend(found)
        elif any(ch in item for ch in "*?["):
            out.extend(Path(x) for x in sorted(glob.glob(item)))
        else:
            out.append(p)
    if not out:
        raise DataError("no scans given")
    return out


def _load_scan(path, args, spec: SensorSpec, need_labels: bool = False) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise DataError(f"scan not found: {path}")
    cloud = read_kitti_bin(path)
    label_path = _sidecar(path, ".label", "labels")
    if label_path is not None:
        labels, instances = read_kitti_label(label_path, cloud.n)
        if args.label_map == "semantic-kitti":
            labels = remap_semantic_kitti(labels)
        cloud = cloud.replace(labels=labels, instances=instances)
    elif need_labels:
        raise DataError(f"no label file for {path}")
    ring_path = _sidecar(path, ".ring", "rings")
    source = args.ring_source
    if source == "auto":
        source = "sidecar" if ring_path is not None else "heuristic"
    if source == "sidecar":
        if ring_path is None:
            raise DataError(f"no ring sidecar for {path}")
        return assign_rings(cloud, spec, source=ring_path)
    return assign_rings(cloud, spec, source="heuristic", direction=args.ring_direction)


def _emit(obj, out: Optional[str] = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


# -------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    spec = _sensor(args)
    if args.collision_free:
        if args.collision_boost:
            raise UsageError("--collision-free cannot be combined with --collision-boost")
        spec = SensorSpec(spec.height, spec.width, spec.width)
    scene = synth.random_scene(
        spec, seed=args.seed, n_boxes=args.n_boxes, n_poles=args.n_poles,
        collision_boost=args.collision_boost, noise=args.noise, two_class=args.two_class,
        wall_radius=args.wall_radius, with_wall=not args.no_wall,
    )
    scan = synth.generate(scene)
    paths = synth.write_scan(args.out, scan.cloud)
    meta = dict(scan.meta, files=paths, two_class=args.two_class,
                collision_boost=args.collision_boost)
    Path(f"{args.out}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _emit(meta)
    return 0


def cmd_project(args) -> int:
    spec = _sensor(args)
    cloud = _load_scan(args.scan, args, spec)
    img, lut = project(cloud, spec)
    if args.out:
        save_range_image(args.out, img)
    if args.png:
        save_range_png(args.png, img)
    _emit({
        "height": img.valid.shape[0],
        "width": img.valid.shape[1],
        "points": int(cloud.n),
        "valid_pixels": int(img.valid.sum()),
        "dropped_points": int(dropped_mask(img, lut).sum()),
        "degenerate_points": int(lut.n_degenerate),
        "out": args.out,
    })
    return 0


def _scan_confusions(paths, args, spec, fn) -> list:
    def work(s, e):
        return [fn(_load_scan(p, args, spec, need_labels=True)) for p in paths[s:e]]

    parts = rknn._run_chunks(work, len(paths), 1, args.threads)
    return [cm for part in parts for cm in part]


def _total(cms, n_classes: int) -> metrics.ConfusionMatrix:
    total = metrics.ConfusionMatrix(n_classes)
    for cm in cms:
        total.counts += cm.counts
    return total


def cmd_upper_bound(args) -> int:
    spec = _sensor(args)
    paths = _expand_scans(args.scans)
    n_classes = args.n_classes

    def one(cloud):
        img, lut = project(cloud, spec)
        return cloud.labels, reproject_labels(img, lut)

    pairs = _scan_confusions(paths, args, spec, one)
    top = max(int(max(g.max(initial=0), p.max(initial=0))) for g, p in pairs) + 1
    names = _class_names(args, top)
    n = n_classes or (len(names) if names else top)
    cm = _total([metrics.confusion(g, p, n) for g, p in pairs], n)
    rep = metrics.report(cm, names)
    rep["miou_percent"] = None if rep["miou"] is None else 100.0 * rep["miou"]
    rep["scans"] = len(paths)
    rep["sensor"] = [spec.height, spec.width, spec.virtual_width]
    _emit(rep, args.out)
    return 0


def cmd_augment(args) -> int:
    spec = _sensor(args)
    target = _load_scan(args.target, args, spec, need_labels=True)
    donor = _load_scan(args.donor, args, spec, need_labels=True)
    if args.rare_classes:
        raw = args.rare_classes
        rare = [int(x) for x in (raw if isinstance(raw, list) else str(raw).split(","))]
    else:
        key = args.classes or PRESET_CLASSES.get(args.preset)
        if key not in RARE_CLASS_PRESETS:
            raise UsageError("give --rare-classes (no rare-class preset for this class table)")
        rare = list(RARE_CLASS_PRESETS[key])
    cfg = vrcrop.AugmentConfig(rare_classes=rare, paste_count=args.paste_count,
                               probability=args.probability, seed=args.seed)
    rec = vrcrop.augment_scan(target, donor, spec, cfg, mode=args.mode)
    paths = synth.write_scan(args.out, rec.cloud)
    manifest = {
        "seed": args.seed,
        "target": str(args.target),
        "donor": str(args.donor),
        "mode": args.mode,
        "rare_classes": rare,
        "pastes": rec.pastes,
        "deleted": int(sum(p["deleted"] for p in rec.pastes)),
        "points_in": int(target.n),
        "points_out": int(rec.cloud.n),
        "capacity": spec.capacity,
        "files": paths,
    }
    Path(f"{args.out}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _emit(manifest)
    return 0


def cmd_postprocess(args) -> int:
    spec = _sensor(args)
    cloud = _load_scan(args.scan, args, spec)
    point_pred, _ = read_kitti_label(args.pred, cloud.n)
    img, lut = project(cloud, spec)
    pred = pixel_labels(img, point_pred)
    win = _window(args.window)
    if args.method == "knn":
        out = rknn.knn_vote(img, lut, cloud.range, pred, window=win, k=args.k, threads=args.threads)
    else:
        out = rknn.nla(img, lut, cloud.range, pred, window=win, threads=args.threads)
    write_kitti_label(args.out, out)
    changed = int((out != point_pred).sum())
    _emit({"method": args.method, "window": list(win), "k": args.k if args.method == "knn" else 1,
           "points": int(cloud.n), "labels_written": int(out.shape[0]), "changed": changed,
           "out": args.out})
    return 0


def _pdm_config(args, n_classes: int) -> pdm.PdmConfig:
    return pdm.PdmConfig(
        variant=args.variant, window=_window(args.window), k=args.k,
        feature_dim=args.feature_dim, hidden_dim=args.hidden_dim, n_classes=n_classes,
        signed_offsets=args.signed_offsets, scalar_weights=args.scalar_weights,
    )


def cmd_train_pdm(args) -> int:
    spec = _sensor(args)
    paths = _expand_scans(args.scans)
    scans = [_load_scan(p, args, spec, need_labels=True) for p in paths]
    top = max(int(c.labels.max(initial=0)) for c in scans) + 1
    n_classes = args.n_classes or top
    if n_classes < top:
        raise DataError(f"labels go up to {top - 1} but --n-classes is {n_classes}")
    if args.batch_points is not None and args.batch_points < 1:
        raise UsageError(f"--batch-points must be positive, got {args.batch_points}")
    cfg = _pdm_config(args, max(n_classes, 2))
    encoder, decoder = pdm.build_model(cfg, seed=args.seed)
    result = pdm.train_pdm(encoder, decoder, scans, spec, steps=args.steps, seed=args.seed,
                           lr=args.lr, weight_decay=args.weight_decay, log_every=args.log_every,
                           batch_points=args.batch_points)
    meta = {"config": dataclasses.asdict(cfg), "sensor": [spec.height, spec.width, spec.virtual_width],
            "seed": args.seed, "steps": args.steps, "version": __version__}
    meta["config"]["window"] = list(cfg.window)
    save_checkpoint(args.out, pdm.model_state(encoder, decoder), meta)
    if args.trace:
        Path(args.trace).write_text(result.to_csv())
    _emit({"checkpoint": args.out, "trace": args.trace, "steps": len(result.steps),
           "final_loss": result.losses[-1] if result.losses else None,
           "final_accuracy": result.accuracies[-1] if result.accuracies else None})
    return 0


def cmd_infer_pdm(args) -> int:
    spec = _sensor(args)
    state, meta = load_checkpoint(args.checkpoint)
    try:
        cfg_dict = dict(meta["config"])
        cfg_dict["window"] = tuple(cfg_dict["window"])
        cfg = pdm.PdmConfig(**cfg_dict)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint metadata has no usable model config: {exc}") from exc
    encoder, decoder = pdm.build_model(cfg, seed=args.seed)
    pdm.load_model_state(encoder, decoder, state)
    cloud = _load_scan(args.scan, args, spec)
    pred = pdm.predict(encoder, decoder, cloud, spec, threads=args.threads)
    write_kitti_label(args.out, pred)
    summary = {"points": int(cloud.n), "labels_written": int(pred.shape[0]), "out": args.out}
    if cloud.labels is not None:
        keep = cloud.labels != 0
        summary["accuracy"] = float(np.mean(pred[keep] == cloud.labels[keep])) if keep.any() else None
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    paths = _expand_scans(args.scans)
    preds = args.pred
    if len(preds) != len(paths):
        raise UsageError(f"{len(paths)} scans but {len(preds)} prediction files")
    pairs = []
    for scan, pred_path in zip(paths, preds):
        gt_path = _sidecar(Path(scan), ".label", "labels")
        if gt_path is None:
            raise DataError(f"no ground-truth label file for {scan}")
        n = read_kitti_bin(scan).n
        gt, _ = read_kitti_label(gt_path, n)
        if args.label_map == "semantic-kitti":
            gt = remap_semantic_kitti(gt)
        pred, _ = read_kitti_label(pred_path, n)
        pairs.append((gt, pred))
    top = max(int(max(g.max(initial=0), p.max(initial=0))) for g, p in pairs) + 1
    names = _class_names(args, top)
    n_classes = args.n_classes or (len(names) if names else top)
    cm = _total([metrics.confusion(g, p, n_classes) for g, p in pairs], n_classes)
    rep = metrics.report(cm, names)
    rep["scans"] = len(paths)
    _emit(rep, args.out)
    return 0


# ------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", help="JSON file of flag values (flags given on the command line win)")
    g.add_argument("--seed", type=int, default=123, help="random seed (default 123)")
    g.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    g.add_argument("--preset", choices=sorted(SENSOR_PRESETS), default="semantic-kitti-64x2048",
                   help="sensor geometry")
    g.add_argument("--height", type=int, help="override the preset's ring count")
    g.add_argument("--width", type=int, help="override the preset's range-image width")
    g.add_argument("--virtual-width", type=int, help="override the virtual range-image width")
    g.add_argument("--classes", choices=sorted(CLASS_TABLES), help="class-name table for reports")
    g.add_argument("--ring-source", choices=["auto", "sidecar", "heuristic"], default="auto",
                   help="where ring indices come from (auto: sidecar when present)")
    g.add_argument("--ring-direction", choices=["auto", "cw", "ccw"], default="auto",
                   help="sweep sense for the azimuth ring heuristic")
    g.add_argument("--label-map", choices=["none", "semantic-kitti"], default="none",
                   help="remap raw dataset label ids to training ids")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--variant", choices=pdm.VARIANTS, default="ours")
    g.add_argument("--window", default="5x5", help="neighbor search window, e.g. 5x5")
    g.add_argument("--k", type=int, default=7, help="neighbors per point")
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--hidden-dim", type=int, default=32)
    g.add_argument("--signed-offsets", action="store_true", help="use signed instead of absolute offsets")
    g.add_argument("--scalar-weights", action="store_true", help="one weight per neighbor, shared by channels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rangepdm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rangepdm {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a labeled synthetic scan")
    _common(p)
    p.add_argument("--out", required=True, help="output prefix; writes .bin .label .ring .json")
    p.add_argument("--n-boxes", type=int, default=4)
    p.add_argument("--n-poles", type=int, default=6)
    p.add_argument("--collision-boost", type=int, default=0, help="extra rays per class-boundary cell")
    p.add_argument("--collision-free", action="store_true",
                   help="cast on the real image width so no two points share a pixel")
    p.add_argument("--noise", type=float, default=0.0, help="range noise sigma in meters")
    p.add_argument("--two-class", action="store_true", help="label everything background or object")
    p.add_argument("--wall-radius", type=float, default=30.0)
    p.add_argument("--no-wall", action="store_true", help="leave out the enclosing wall")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project", help="build the range image of one scan")
    _common(p)
    p.add_argument("scan", help="KITTI .bin scan")
    p.add_argument("--out", help="range-image file to write")
    p.add_argument("--png", help="also write a 16-bit range PNG")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("upper-bound", help="mIoU of ground truth copied through the range image")
    _common(p)
    p.add_argument("scans", nargs="+", help=".bin files, globs or sequence directories")
    p.add_argument("--n-classes", type=int)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_upper_bound)

    p = sub.add_parser("augment", help="paste rotated rare instances from a donor scan")
    _common(p)
    p.add_argument("--target", required=True, help="scan to augment")
    p.add_argument("--donor", required=True, help="scan providing rare instances")
    p.add_argument("--out", required=True, help="output prefix; writes .bin .label .ring .json")
    p.add_argument("--rare-classes", help="comma-separated class ids (default: preset table)")
    p.add_argument("--paste-count", type=int, default=1)
    p.add_argument("--probability", type=float, default=1.0)
    p.add_argument("--mode", choices=["vrcrop", "conventional"], default="vrcrop")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("postprocess", help="refine per-point labels with range-image neighbors")
    _common(p)
    p.add_argument("method", choices=["knn", "nla"])
    p.add_argument("scan", help="KITTI .bin scan")
    p.add_argument("--pred", required=True, help="per-point predicted .label file")
    p.add_argument("--out", required=True, help="refined .label file")
    p.add_argument("--window", default="7x7")
    p.add_argument("--k", type=int, default=7)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("train-pdm", help="train encoder and pointwise decoder")
    _common(p)
    _model_flags(p)
    p.add_argument("scans", nargs="+", help="labeled training scans")
    p.add_argument("--out", required=True, help="checkpoint file")
    p.add_argument("--trace", help="CSV of step, loss, accuracy")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--batch-points", type=int, help="points sampled per step (default: all)")
    p.set_defaults(func=cmd_train_pdm)

    p = sub.add_parser("infer-pdm", help="predict per-point labels with a trained checkpoint")
    _common(p)
    p.add_argument("scan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="predicted .label file")
    p.set_defaults(func=cmd_infer_pdm)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _common(p)
    p.add_argument("scans", nargs="+", help="ground-truth scans (labels found next to them)")
    p.add_argument("--pred", nargs="+", required=True, help="prediction .label files, same order")
    p.add_argument("--n-classes", type=int)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("no subcommand given (see --help)")
    if not getattr(args, "config", None):
        return args
    try:
        raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions if a.option_strings} - {"help", "config"}
    values = {}
    for key, value in raw.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        values[dest] = value
    subparser.set_defaults(**values)
    args = parser.parse_args(argv)
    for action in subparser._actions:
        if action.dest not in values or getattr(args, action.dest) is not values[action.dest]:
            continue  # not from the config, or overridden on the command line
        # argparse does not run type conversion on non-string defaults
        if action.type is not None and not isinstance(values[action.dest], str):
            try:
                setattr(args, action.dest, action.type(values[action.dest]))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad config value for {action.dest}: {exc}") from exc
        if action.choices and getattr(args, action.dest) not in action.choices:
            raise UsageError(f"config value {getattr(args, action.dest)!r} not allowed for {action.dest}")
    return args


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    except UsageError as exc:
        print(f"rangepdm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("rangepdm: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        # BLAS stays single-threaded so --threads alone sets parallelism
        with threadpool_limits(limits=1):
            return args.func(args)
    except UsageError as exc:
        print(f"rangepdm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except argparse.ArgumentTypeError as exc:
        print(f"rangepdm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"rangepdm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, OSError) as exc:
        print(f"rangepdm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"rangepdm: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
