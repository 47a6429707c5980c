"""Command-line entry point for the det3d pipeline.

Configuration precedence is flags > ``--config`` file > built-in defaults.
Exit codes: 0 success, 2 usage/config error, 3 input-format error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .assign import (
    BACKGROUND,
    Candidate,
    EmptyAssignmentError,
    build_cost_matrix,
    candidate_ious,
    dynamic_k,
    ota_assign,
)
from .augment import (
    FadingSchedule,
    apply_to_cloud,
    build_object_db,
    inverse_to_detections,
    paste_objects,
    read_object_db,
    tta_set,
    write_object_db,
)
from .config import ConfigError, PipelineConfig, RunManifest
from .evalmetrics import evaluate
from .fusion import EnsembleConfig, ensemble_fuse, nms, per_class, wbf
from .pointcloud import PointCloudFormatError, VoxelGridSpec, read_pcf, voxelize, write_pcf
from .structures import (
    Detection,
    SchemaError,
    dumps_line,
    group_by_frame,
    read_detections,
    read_ground_truth,
    read_records,
    write_ground_truth,
)

logger = logging.getLogger("det3d")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3, 4


class InputError(Exception):
    """Bad or missing input data; maps to exit code 3."""


def _setup_logging() -> None:
    level = os.environ.get("DET3D_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _map(fn, items, jobs: int) -> list:
    """Ordered map; results come back in input order whatever ``jobs`` is."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _open_output(path):
    return open(path, "w", encoding="utf-8") if path else sys.stdout


def _write_lines(path, records) -> None:
    fh = _open_output(path)
    try:
        for record in records:
            fh.write(dumps_line(record))
            fh.write("\n")
    finally:
        if fh is not sys.stdout:
            fh.close()


def _det_record(det: Detection) -> dict:
    from .structures import detection_to_record

    return detection_to_record(det)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


# --------------------------------------------------------------------------
# subcommands


def cmd_voxelize(args, config: PipelineConfig, manifest: RunManifest) -> int:
    path = _require_file(args.input, "point cloud")
    manifest.add_input(path)
    cloud = read_pcf(path)
    spec = VoxelGridSpec(tuple(config.voxel.min), tuple(config.voxel.max), tuple(config.voxel.voxel_size))
    grid = voxelize(cloud, spec)
    nx, ny, nz = spec.dims
    summary = {
        "frame_id": cloud.frame_id,
        "points": len(cloud),
        "points_in_grid": int(grid.counts.sum()),
        "cells": len(grid),
        "occupancy": grid.occupancy,
        "dims": [nx, ny, nz],
    }
    print(f"dims: {nx} x {ny} x {nz}")
    print(f"cells: {len(grid)}")
    print(f"occupancy: {grid.occupancy:.6g}")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, sort_keys=True, indent=2)
            fh.write("\n")
        manifest.add_output(args.output)
    if args.dump:
        _write_lines(
            args.dump,
            (
                {"index": idx.tolist(), "count": int(n), "mean": feat.tolist()}
                for idx, feat, n in zip(grid.indices, grid.features, grid.counts)
            ),
        )
        manifest.add_output(args.dump)
    return EXIT_OK


def _fuse_frames(dets: list[Detection], config: PipelineConfig, jobs: int, method: str = "wbf") -> list[Detection]:
    frames = group_by_frame(dets)
    fc = config.fusion

    def run(frame_id):
        group = frames[frame_id]
        if method == "nms":
            return per_class(nms, group, iou_threshold=fc.nms_iou_threshold, iou_type=fc.iou_type)
        return per_class(
            wbf, group,
            iou_match_threshold=fc.iou_match_threshold,
            max_boxes=fc.max_boxes,
            iou_type=fc.iou_type,
            yaw_mode=fc.yaw_mode,
        )

    out = []
    for fused in _map(run, sorted(frames), jobs):
        out.extend(fused)
    return out


def _with_model(dets, model_id):
    return [Detection(d.box, d.class_id, d.score, model_id, d.frame_id) for d in dets]


def cmd_tta(args, config: PipelineConfig, manifest: RunManifest) -> int:
    transforms = tta_set(config.tta.yaws, config.tta.scales, config.tta.z_offsets)
    if args.cloud:
        cloud = read_pcf(_require_file(args.cloud, "point cloud"))
        manifest.add_input(args.cloud)
        out_dir = Path(args.emit_clouds or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, t in enumerate(transforms):
            target = out_dir / f"variant_{i}.pcf"
            write_pcf(target, apply_to_cloud(t, cloud))
            manifest.add_output(target)
    if args.detections_dir is None:
        if not args.cloud:
            raise InputError("tta needs --detections-dir (and/or --cloud)")
        return EXIT_OK

    det_dir = Path(args.detections_dir)
    pooled: list[Detection] = []
    for i, t in enumerate(transforms):
        path = det_dir / f"variant_{i}.jsonl"
        if not path.is_file():
            raise InputError(f"missing detections for TTA variant {i}: {path}")
        manifest.add_input(path)
        pooled.extend(inverse_to_detections(t, read_detections(path)))
    logger.info("tta: pooled %d detections from %d variants", len(pooled), len(transforms))
    fused = _fuse_frames(pooled, config, args.jobs)
    if args.model_id:
        fused = _with_model(fused, args.model_id)
    _write_lines(args.output, (_det_record(d) for d in fused))
    if args.output:
        manifest.add_output(args.output)
    return EXIT_OK


def cmd_fuse(args, config: PipelineConfig, manifest: RunManifest) -> int:
    path = _require_file(args.detections, "detections")
    manifest.add_input(path)
    fused = _fuse_frames(read_detections(path), config, args.jobs, args.method)
    _write_lines(args.output, (_det_record(d) for d in fused))
    if args.output:
        manifest.add_output(args.output)
    return EXIT_OK


def _parse_model_inputs(specs) -> dict[str, list[Detection]]:
    per_model: dict[str, list[Detection]] = {}
    for spec in specs:
        forced = None
        if "=" in spec:
            forced, spec = spec.split("=", 1)
        path = _require_file(spec, "detections")
        for det in read_detections(path):
            model_id = forced or det.model_id or path.stem
            per_model.setdefault(model_id, []).append(
                Detection(det.box, det.class_id, det.score, model_id, det.frame_id)
            )
    return per_model


def cmd_ensemble(args, config: PipelineConfig, manifest: RunManifest) -> int:
    per_model = _parse_model_inputs(args.inputs)
    for spec in args.inputs:
        manifest.add_input(spec.split("=", 1)[-1])
    if args.ensemble_config:
        manifest.add_input(args.ensemble_config)
        ens = EnsembleConfig.load(args.ensemble_config)
    elif config.fusion.ensemble is not None:
        ens = EnsembleConfig.from_dict(config.fusion.ensemble)
    else:
        classes = sorted({d.class_id for dets in per_model.values() for d in dets})
        ens = EnsembleConfig(
            {c: {m: 1.0 for m in per_model} for c in classes},
            config.fusion.iou_match_threshold,
            config.fusion.max_boxes,
        )

    known = set(ens.model_ids)
    for model_id, dets in per_model.items():
        if model_id not in known:
            raise InputError(f"unknown model_id {model_id!r} (configured: {sorted(known)})")
        missing = sorted({d.class_id for d in dets} - set(ens.classes))
        if missing:
            raise InputError(f"model {model_id!r} has detections for unconfigured classes {missing}")

    frames: dict[str, dict[str, list[Detection]]] = {}
    for model_id, dets in per_model.items():
        for det in dets:
            frames.setdefault(det.frame_id, {}).setdefault(model_id, []).append(det)

    def run(frame_id):
        return ensemble_fuse(frames[frame_id], ens, config.fusion.iou_type, config.fusion.yaw_mode)

    out = []
    for fused in _map(run, sorted(frames), args.jobs):
        out.extend(fused)
    _write_lines(args.output, (_det_record(d) for d in out))
    if args.output:
        manifest.add_output(args.output)
    return EXIT_OK


def _read_candidates(path) -> dict[str, list[Candidate]]:
    from .structures import detection_from_record

    frames: dict[str, list[tuple[float, Candidate]]] = {}
    for lineno, record in read_records(path):
        det = detection_from_record(record, path, lineno)
        probs = record.get("class_probs")
        if probs is None:
            width = max(det.class_id + 1, 1)
            probs = [0.0] * width
            probs[det.class_id] = det.score
        elif not isinstance(probs, list) or not all(isinstance(p, (int, float)) and 0 <= p <= 1 for p in probs):
            raise SchemaError('"class_probs" must be a list of probabilities', path, lineno)
        frames.setdefault(det.frame_id, []).append(Candidate(det.box, tuple(float(p) for p in probs)))
    return frames


def _pad_probs(cands: list[Candidate], width: int) -> list[Candidate]:
    out = []
    for c in cands:
        probs = tuple(c.class_probs) + (0.0,) * (width - len(c.class_probs))
        out.append(Candidate(c.box, probs, c.iou_pred, c.location))
    return out


def cmd_assign(args, config: PipelineConfig, manifest: RunManifest) -> int:
    if args.cost:
        path = _require_file(args.cost, "cost matrix")
        manifest.add_input(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            cost = np.asarray(doc["cost"], dtype=np.float64)
            if "budgets" in doc:
                budgets = [int(k) for k in doc["budgets"]]
            else:
                budgets = [dynamic_k(row) for row in doc["ious"]]
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: malformed cost document ({exc})") from None
        result = ota_assign(cost, budgets)
        records = [
            {"frame_id": "", "candidate_index": j, "gt_index": int(i), "label": label}
            for j, (i, label) in enumerate(zip(result.assigned.tolist(), result.labels()))
        ]
        print(" ".join(result.labels()))
        _write_lines(args.output, records)
        if args.output:
            manifest.add_output(args.output)
        return EXIT_OK

    if not (args.gts and args.candidates):
        raise InputError("assign needs --cost, or both --gts and --candidates")
    manifest.add_input(_require_file(args.gts, "ground truth"))
    manifest.add_input(_require_file(args.candidates, "candidates"))
    gts = group_by_frame(read_ground_truth(args.gts))
    cands = _read_candidates(args.candidates)
    ac = config.assign

    def run(frame_id):
        frame_gts = gts.get(frame_id, [])
        frame_cands = cands.get(frame_id, [])
        frame_cands = sorted(frame_cands, key=lambda c: -c.score)[: ac.top_m]
        if not frame_gts or not frame_cands:
            return [
                {"frame_id": frame_id, "candidate_index": j, "gt_index": BACKGROUND, "label": "BACKGROUND"}
                for j in range(len(frame_cands))
            ]
        width = max([ac.num_classes] + [len(c.class_probs) for c in frame_cands] + [g.class_id + 1 for g in frame_gts])
        frame_cands = _pad_probs(frame_cands, width)
        cost = build_cost_matrix(frame_gts, frame_cands)
        ious = candidate_ious(frame_gts, frame_cands, ac.iou_type)
        result = ota_assign(cost, [dynamic_k(row) for row in ious])
        return [
            {
                "frame_id": frame_id,
                "candidate_index": j,
                "gt_index": int(i),
                "label": label,
                "box": frame_cands[j].box.to_list(),
            }
            for j, (i, label) in enumerate(zip(result.assigned.tolist(), result.labels()))
        ]

    records = []
    for chunk in _map(run, sorted(set(gts) | set(cands)), args.jobs):
        records.extend(chunk)
    _write_lines(args.output, records)
    if args.output:
        manifest.add_output(args.output)
    return EXIT_OK


def cmd_eval(args, config: PipelineConfig, manifest: RunManifest) -> int:
    det_path = _require_file(args.detections, "detections")
    gt_path = _require_file(args.gts, "ground truth")
    manifest.add_input(det_path)
    manifest.add_input(gt_path)
    dets = group_by_frame(read_detections(det_path))
    gts = group_by_frame(read_ground_truth(gt_path))
    result = evaluate(dets, gts, config.eval_thresholds, config.eval.default_iou_threshold, config.eval.iou_type)
    report = result.to_dict()
    for class_id, m in sorted(result.per_class.items()):
        ap = "n/a" if m.ap is None else f"{m.ap:.4f}"
        aph = "n/a" if m.aph is None else f"{m.aph:.4f}"
        print(f"class {class_id}: AP {ap} APH {aph} (gt {m.num_gt}, dets {m.num_dets})")
    print(f"mAP {result.mAP:.4f} mAPH {result.mAPH:.4f}")
    fh = _open_output(args.output)
    try:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.output:
        manifest.add_output(args.output)
    if args.pr_csv:
        result.write_pr_csv(args.pr_csv)
        manifest.add_output(args.pr_csv)
    return EXIT_OK


def cmd_gtpaste_build(args, config: PipelineConfig, manifest: RunManifest) -> int:
    gt_path = _require_file(args.gts, "ground truth")
    manifest.add_input(gt_path)
    gts = group_by_frame(read_ground_truth(gt_path))
    frames = []
    for cloud_path in args.clouds:
        manifest.add_input(_require_file(cloud_path, "point cloud"))
        cloud = read_pcf(cloud_path)
        frames.append((cloud, gts.get(cloud.frame_id, [])))
    entries = build_object_db(frames)
    if not args.output:
        raise InputError("gtpaste-build needs --output")
    write_object_db(args.output, entries)
    manifest.add_output(args.output)
    print(f"entries: {len(entries)}")
    return EXIT_OK


def cmd_gtpaste_apply(args, config: PipelineConfig, manifest: RunManifest) -> int:
    for path, what in ((args.db, "object database"), (args.cloud, "point cloud"), (args.gts, "ground truth")):
        manifest.add_input(_require_file(path, what))
    cloud = read_pcf(args.cloud)
    try:
        db = read_object_db(args.db, cloud.feature_dim)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.db}: malformed object database ({exc})") from None
    objects = [o for o in read_ground_truth(args.gts) if o.frame_id == cloud.frame_id]
    gp = config.gtpaste
    counts = {int(k): int(v) for k, v in gp.per_class_counts.items()}
    schedule = FadingSchedule(gp.total_epochs, gp.fade_last)
    new_cloud, new_objects = paste_objects(
        (cloud, objects), db, counts, args.epoch, schedule, config.seed,
        placement=gp.placement,
        resample_range=tuple(gp.resample_range) if gp.resample_range else None,
    )
    if not args.output:
        raise InputError("gtpaste-apply needs --output")
    write_pcf(args.output, new_cloud)
    gts_out = args.output_gts or str(Path(args.output).with_suffix(".jsonl"))
    write_ground_truth(gts_out, new_objects)
    manifest.add_output(args.output)
    manifest.add_output(gts_out)
    print(f"pasted: {len(new_objects) - len(objects)}")
    return EXIT_OK


COMMANDS = {
    "voxelize": cmd_voxelize,
    "tta": cmd_tta,
    "assign": cmd_assign,
    "fuse": cmd_fuse,
    "ensemble": cmd_ensemble,
    "eval": cmd_eval,
    "gtpaste-build": cmd_gtpaste_build,
    "gtpaste-apply": cmd_gtpaste_apply,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (a run manifest also works)")
    common.add_argument("--seed", type=int, help="overrides config 'seed'")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for frame-level work")
    common.add_argument("--output", help="main output path (stdout when omitted)")
    common.add_argument("--manifest", help="manifest path (default: OUTPUT.manifest.json)")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=JSON",
        help="override a config key, e.g. --set fusion.max_boxes=300",
    )

    parser = argparse.ArgumentParser(
        prog="det3d",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"det3d {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", parents=[common], help="voxelize a PCF1 point cloud")
    p.add_argument("input")
    p.add_argument("--dump", help="write occupied cells as JSON Lines")

    p = sub.add_parser("tta", parents=[common], help="emit TTA clouds and/or fuse per-variant detections")
    p.add_argument("--cloud", help="PCF1 cloud to expand into variants")
    p.add_argument("--emit-clouds", help="directory for variant_<i>.pcf files")
    p.add_argument("--detections-dir", help="directory holding variant_<i>.jsonl detections")
    p.add_argument("--model-id", help="tag fused detections with this model id")

    p = sub.add_parser("assign", parents=[common], help="budgeted greedy target assignment")
    p.add_argument("--cost", help="JSON {cost: NxM, budgets: [N]} or {cost, ious}")
    p.add_argument("--gts")
    p.add_argument("--candidates")

    p = sub.add_parser("fuse", parents=[common], help="per-frame, per-class WBF or NMS")
    p.add_argument("--detections", required=True)
    p.add_argument("--method", choices=("wbf", "nms"), default="wbf")

    p = sub.add_parser("ensemble", parents=[common], help="weighted multi-model fusion")
    p.add_argument("inputs", nargs="+", metavar="[MODEL=]PATH")
    p.add_argument("--ensemble-config", help="JSON {classes: {...}, iou_match_threshold, max_boxes}")

    p = sub.add_parser("eval", parents=[common], help="AP / APH report")
    p.add_argument("--detections", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--pr-csv", help="also write the PR curves as CSV")

    p = sub.add_parser("gtpaste-build", parents=[common], help="build the GT-paste object database")
    p.add_argument("--gts", required=True)
    p.add_argument("clouds", nargs="+", help="PCF1 clouds named <frame_id>.pcf")

    p = sub.add_parser("gtpaste-apply", parents=[common], help="paste database objects into a frame")
    p.add_argument("--db", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--epoch", type=int, required=True)
    p.add_argument("--output-gts")
    return parser


def resolve_config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=JSON, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        config = config.override(key, value)
    if args.seed is not None:
        config = config.override("seed", args.seed)
    return config


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        print(f"det3d: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    manifest = RunManifest(args.command, config.to_dict(), config.seed)
    try:
        code = COMMANDS[args.command](args, config, manifest)
    except (InputError, SchemaError, PointCloudFormatError, EmptyAssignmentError) as exc:
        print(f"det3d {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as exc:
        print(f"det3d {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AssertionError as exc:
        print(f"det3d {args.command}: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:
        logger.exception("unexpected failure")
        print(f"det3d {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL

    manifest_path = args.manifest or (f"{args.output}.manifest.json" if args.output else None)
    if manifest_path:
        manifest.write(manifest_path)
    else:
        print(json.dumps(manifest.to_dict(), sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
