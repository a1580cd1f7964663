"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage/config error, 2 data error. All file outputs
are written atomically (temp + rename) so reruns over unchanged inputs are
byte-identical. `--seed` is honored wherever randomness exists; `--json`
switches the human summary to structured output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import synth
from .augment import AugmentConfig
from .config import ConfigError, EvalConfig, ProjectConfig, load_project_config, model_config_from
from .detector.inference import infer
from .detector.network import MiniSSD, load_checkpoint, save_checkpoint
from .detector.train import TrainConfig, train, training_set_from_manifest, write_loss_trace
from .grid import FieldKind, GridFileError, encode_png, load_grid, render_image, save_grid
from .labels import (
    BoundingBox,
    LabelStore,
    StageClass,
    export_dataset,
    import_dataset,
    manifest_from_annotations,
    split_train_test,
    suggest_box,
)
from .metrics import GroundTruth, ScoredDetection, evaluate_detections, mean_ap, write_report
from .tracking import detect_centers, link_tracks, track_report, tracks_to_jsonl

USAGE_ERROR = 1
DATA_ERROR = 2


class DataError(Exception):
    pass


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


def _emit(args, human: str, payload: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


def _load_series_frames(in_dir: Path, kind: FieldKind):
    files = sorted(Path(in_dir).glob("*.etcg"))
    if not files:
        raise DataError(f"no .etcg files under {in_dir}")
    try:
        frames = [load_grid(p, kind) for p in files]
    except GridFileError as e:
        raise DataError(str(e)) from None
    frames.sort(key=lambda g: g.timestamp)
    return frames


# -- subcommand implementations -------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = _project(args)
    dest = cfg.data_dir / "frames"
    dest.mkdir(parents=True, exist_ok=True)
    index = []
    for src in sorted(Path(p) for p in args.files):
        try:
            grid = load_grid(src)
        except (GridFileError, OSError) as e:
            raise DataError(str(e)) from None
        name = f"{grid.kind.name.lower()}-{grid.timestamp}.etcg"
        _atomic_write_bytes(dest / name, src.read_bytes())
        index.append({"file": f"frames/{name}", "kind": grid.kind.name, "timestamp": grid.timestamp,
                      "n_lon": grid.n_lon, "n_lat": grid.n_lat})
    index.sort(key=lambda r: (r["kind"], r["timestamp"]))
    _atomic_write_text(cfg.data_dir / "index.json", json.dumps(index, indent=2, sort_keys=True) + "\n")
    _emit(args, f"ingested {len(index)} frame(s) into {dest}", {"ingested": len(index)})
    return 0


def cmd_render(args) -> int:
    out_dir = Path(args.out)
    count = 0
    for src in sorted(Path(p) for p in args.files):
        try:
            grid = load_grid(src)
        except (GridFileError, OSError) as e:
            raise DataError(str(e)) from None
        png = encode_png(render_image(grid))
        _atomic_write_bytes(out_dir / (src.stem + ".png"), png)
        count += 1
    _emit(args, f"rendered {count} image(s) into {out_dir}", {"rendered": count})
    return 0


def cmd_centers(args) -> int:
    cfg = _project(args)
    frames = _load_series_frames(Path(args.input), FieldKind.MSLP)
    per_frame = detect_centers(frames, cfg.tracker)
    records = [
        {
            "frame": i,
            "centers": [
                {
                    "cell": list(c.cell),
                    "lat": c.position.lat,
                    "lon": c.position.lon,
                    "mslp": c.mslp,
                    "possibly_tropical": c.possibly_tropical,
                }
                for c in centers
            ],
        }
        for i, centers in enumerate(per_frame)
    ]
    _atomic_write_text(Path(args.out), json.dumps(records, indent=2, sort_keys=True) + "\n")
    total = sum(len(r["centers"]) for r in records)
    _emit(args, f"{total} center(s) over {len(records)} frame(s) -> {args.out}",
          {"frames": len(records), "centers": total})
    return 0


def cmd_track(args) -> int:
    cfg = _project(args)
    frames = _load_series_frames(Path(args.input), FieldKind.MSLP)
    tracks = link_tracks(detect_centers(frames, cfg.tracker), cfg.tracker)
    _atomic_write_text(Path(args.out), tracks_to_jsonl(tracks))
    stats = track_report(tracks)
    _emit(
        args,
        f"{stats.count} track(s), durations {stats.min_duration_hours}..{stats.max_duration_hours} h -> {args.out}",
        {"tracks": stats.count, "min_hours": stats.min_duration_hours, "max_hours": stats.max_duration_hours},
    )
    return 0


def cmd_suggest(args) -> int:
    cfg = _project(args)
    frames = _load_series_frames(Path(args.input), FieldKind.MSLP)
    per_frame = detect_centers(frames, cfg.tracker)
    records = []
    for i, centers in enumerate(per_frame):
        records.append(
            {
                "frame": i,
                "suggestions": [
                    {
                        "lat": c.position.lat,
                        "lon": c.position.lon,
                        "possibly_tropical": c.possibly_tropical,
                        "box": dict(zip(("xmin", "ymin", "xmax", "ymax"), suggest_box(c, frames[i]).as_tuple())),
                    }
                    for c in centers
                ],
            }
        )
    _atomic_write_text(Path(args.out), json.dumps(records, indent=2, sort_keys=True) + "\n")
    total = sum(len(r["suggestions"]) for r in records)
    _emit(args, f"{total} suggestion(s) -> {args.out}", {"suggestions": total})
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.mode == "mslp":
        rng = np.random.default_rng(args.seed)
        lows = []
        for k in range(args.lows):
            i0 = int(rng.integers(8, 24))
            j0 = int(rng.integers(0, 144))
            cells = [(i0, (j0 + t) % 144) for t in range(args.frames)]
            lows.append(synth.PlantedLow(synth.path_on_cells(cells)))
        series = synth.gen_mslp_series(lows, n_frames=args.frames, seed=args.seed)
        out.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(series.frames):
            save_grid(frame, out / f"frame-{i:04d}.etcg")
        _emit(args, f"wrote {len(series)} MSLP frame(s) with {args.lows} low(s) to {out}",
              {"frames": len(series), "lows": args.lows})
    else:
        manifest, images = synth.gen_dataset(
            tuple(args.train_counts), tuple(args.test_counts), seed=args.seed
        )
        export_dataset(manifest, images, out)
        _emit(args, f"wrote synthetic dataset ({len(manifest.entries)} frames) to {out}",
              {"frames": len(manifest.entries)})
    return 0


def cmd_split(args) -> int:
    manifest = import_dataset(Path(args.input))
    frame_boxes = {e.frame: e.boxes for e in manifest.entries}
    new = split_train_test(frame_boxes, ratio=args.ratio, seed=args.seed)
    images = _dataset_images(Path(args.input), manifest)
    export_dataset(new, images, Path(args.out))
    n_test = len(new.frames("test"))
    _emit(args, f"split {len(new.entries)} frames -> {n_test} test / {len(new.entries) - n_test} train",
          {"test": n_test, "train": len(new.entries) - n_test})
    return 0


def _dataset_images(root: Path, manifest) -> dict[int, np.ndarray]:
    from .grid import decode_png

    out = {}
    for entry in manifest.entries:
        path = root / "frames" / f"{entry.frame}.png"
        if not path.exists():
            raise DataError(f"dataset is missing {path}")
        out[entry.frame] = decode_png(path.read_bytes())
    return out


def cmd_train(args) -> int:
    cfg = _project(args)
    manifest = import_dataset(Path(args.data))
    images = _dataset_images(Path(args.data), manifest)
    dataset = training_set_from_manifest(manifest, images, "train")
    if len(dataset) == 0:
        raise DataError("no training frames in the dataset")
    train_cfg = cfg.train
    if args.iterations is not None:
        train_cfg = TrainConfig(
            iterations=args.iterations, lr=train_cfg.lr, batch_size=train_cfg.batch_size,
            alpha=train_cfg.alpha, neg_pos_ratio=train_cfg.neg_pos_ratio,
            iou_threshold=train_cfg.iou_threshold, seed=args.seed if args.seed is not None else train_cfg.seed,
            log_every=train_cfg.log_every, calibrate_init=train_cfg.calibrate_init,
        )
    elif args.seed is not None:
        train_cfg = TrainConfig(
            iterations=train_cfg.iterations, lr=train_cfg.lr, batch_size=train_cfg.batch_size,
            alpha=train_cfg.alpha, neg_pos_ratio=train_cfg.neg_pos_ratio,
            iou_threshold=train_cfg.iou_threshold, seed=args.seed,
            log_every=train_cfg.log_every, calibrate_init=train_cfg.calibrate_init,
        )
    result = train(dataset, model_config_from(cfg), train_cfg, cfg.augment)
    save_checkpoint(Path(args.out), result.model, train_cfg, result.rng_state)
    if args.trace:
        write_loss_trace(result.trace, Path(args.trace))
    final = float(np.mean([r["total"] for r in result.trace[-min(100, len(result.trace)):]]))
    _emit(args, f"trained {train_cfg.iterations} iteration(s); final mean loss {final:.4f} -> {args.out}",
          {"iterations": train_cfg.iterations, "final_loss": final})
    return 0


def _read_gt_jsonl(path: Path) -> list[GroundTruth]:
    gts = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            for b in rec["boxes"]:
                gts.append(
                    GroundTruth(
                        rec["frame"],
                        int(StageClass.from_wire(b["stage"])),
                        BoundingBox(b["xmin"], b["ymin"], b["xmax"], b["ymax"]),
                    )
                )
    return gts


def _read_pred_jsonl(path: Path) -> list[ScoredDetection]:
    dets = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            for b in rec["boxes"]:
                dets.append(
                    ScoredDetection(
                        rec["frame"],
                        int(StageClass.from_wire(b["stage"])),
                        BoundingBox(b["xmin"], b["ymin"], b["xmax"], b["ymax"]),
                        float(b["score"]),
                    )
                )
    return dets


def cmd_eval(args) -> int:
    cfg = _project(args)
    ev: EvalConfig = cfg.eval
    gt_path = Path(args.gt)
    if gt_path.is_dir():
        gt_file = gt_path / "annotations.jsonl"
    else:
        gt_file = gt_path
    if not gt_file.exists():
        raise DataError(f"missing ground truth: {gt_file}")
    gts = _read_gt_jsonl(gt_file)
    if args.pred:
        dets = _read_pred_jsonl(Path(args.pred))
    elif args.model:
        model, _, _ = load_checkpoint(Path(args.model))
        manifest = import_dataset(gt_path)
        images = _dataset_images(gt_path, manifest)
        split = args.split
        gts = []
        dets = []
        for entry in manifest.frames(split):
            for b, s in entry.boxes:
                gts.append(GroundTruth(entry.frame, int(s), b))
            image = images[entry.frame].astype(np.float64) / 255.0
            for d in infer(model, image, score_threshold=ev.score_threshold,
                           nms_iou=ev.nms_iou, top_k=ev.top_k):
                dets.append(ScoredDetection(entry.frame, int(d.stage), d.box, d.score))
    else:
        raise DataError("eval needs --pred or --model")
    results = evaluate_detections(dets, gts, iou_threshold=ev.iou_threshold, interpolation=ev.interpolation)
    write_report(results, Path(args.out), ev.iou_threshold, ev.interpolation)
    if args.curves:
        from .metrics import write_curves

        write_curves(results, Path(args.curves))
    m = mean_ap(results)
    per_class = {StageClass(k).wire_name: round(r.ap, 4) for k, r in results.items()}
    _emit(args, f"mAP {m:.4f} ({per_class}) -> {args.out}", {"map": m, "ap": per_class})
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_project_app

    cfg = _project(args)
    app = build_project_app(cfg)
    uvicorn.run(app, host=cfg.service.host, port=cfg.service.port, log_level="warning")
    return 0


def cmd_export(args) -> int:
    store = LabelStore(Path(args.journal))
    manifest = manifest_from_annotations(store.annotations(), ratio=args.ratio, seed=args.seed)
    images = {}
    image_dir = Path(args.images)
    for entry in manifest.entries:
        path = image_dir / f"{entry.frame}.png"
        if not path.exists():
            raise DataError(f"missing frame image {path}")
        from .grid import decode_png

        images[entry.frame] = decode_png(path.read_bytes())
    export_dataset(manifest, images, Path(args.out))
    _emit(args, f"exported {len(manifest.entries)} frame(s) to {args.out}", {"frames": len(manifest.entries)})
    return 0


# -- parser ----------------------------------------------------------------------

def _project(args) -> ProjectConfig:
    if getattr(args, "config", None):
        return load_project_config(args.config)
    return ProjectConfig()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="etcdet", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="project TOML config")
        sp.add_argument("--json", action="store_true", help="machine-readable summary")

    sp = sub.add_parser("ingest", help="validate ETCG files and copy them into the data dir")
    sp.add_argument("files", nargs="+")
    common(sp)
    sp.set_defaults(fn=cmd_ingest)

    sp = sub.add_parser("render", help="render ETCG grids to grayscale PNG")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("centers", help="detect cyclone centers per frame")
    sp.add_argument("--in", dest="input", required=True, help="directory of MSLP .etcg frames")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(fn=cmd_centers)

    sp = sub.add_parser("track", help="link centers into tracks (JSON Lines)")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(fn=cmd_track)

    sp = sub.add_parser("suggest", help="suggested boxes for detected centers")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(fn=cmd_suggest)

    sp = sub.add_parser("synth", help="generate synthetic data")
    sp.add_argument("mode", choices=["mslp", "dataset"])
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int, default=8, help="mslp: number of frames")
    sp.add_argument("--lows", type=int, default=3, help="mslp: number of planted lows")
    sp.add_argument("--train-counts", type=int, nargs=3, default=[554, 650, 303],
                    metavar=("DEV", "MAT", "DEC"))
    sp.add_argument("--test-counts", type=int, nargs=3, default=[112, 130, 70],
                    metavar=("DEV", "MAT", "DEC"))
    common(sp, config=False)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("split", help="re-split an exported dataset by frame")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ratio", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    common(sp, config=False)
    sp.set_defaults(fn=cmd_split)

    sp = sub.add_parser("train", help="train the detector on an exported dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--trace", help="loss trace CSV path")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--seed", type=int)
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    sp.add_argument("--gt", required=True, help="dataset dir or annotations JSONL")
    sp.add_argument("--pred", help="predictions JSONL")
    sp.add_argument("--model", help="checkpoint: run inference instead of reading --pred")
    sp.add_argument("--split", default="test", choices=["train", "test"])
    sp.add_argument("--out", required=True, help="report CSV")
    sp.add_argument("--curves", help="per-class PR curve CSV")
    common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("serve", help="run the annotation HTTP service")
    common(sp)
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("export", help="export consensus labels as a dataset")
    sp.add_argument("--journal", required=True)
    sp.add_argument("--images", required=True, help="directory of <frame>.png renders")
    sp.add_argument("--out", required=True)
    sp.add_argument("--ratio", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    common(sp, config=False)
    sp.set_defaults(fn=cmd_export)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse uses 2 for usage problems; our contract reserves 2 for data errors
        return USAGE_ERROR if e.code else 0
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return DATA_ERROR
    except (GridFileError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
