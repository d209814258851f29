"""Command-line front end: synth, gen-anchors, train, eval, infer, explain,
and crossval, all driven by one config file with flag overrides.

Every command writes a run manifest (resolved config + seed + version) into
its output directory, and that manifest is itself a valid --config input, so
any run can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, apply_overrides, load_config
from .data import (
    ManifestEntry,
    load_annotations,
    load_manifest_sequences,
    save_annotations,
    save_features_binary,
    save_manifest,
    synth_generate,
)
from .errors import (
    ConfigError,
    DataError,
    ParseError,
    TicNetError,
    TrainingError,
    UsageError,
)
from .geometry import AnchorSet, Interval
from .model import LEVEL_STRIDES

ENV_CONFIG = "TICNET_CONFIG"

_EXIT_CODES = (
    ((UsageError, ConfigError), 2),
    ((DataError, ParseError), 3),
    ((TrainingError,), 4),
)


def _resolve_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(cfg: ExperimentConfig, command: str, out: Path) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": cfg.to_dict(),
    }
    with open(out / "run.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def _load_dataset(cfg: ExperimentConfig):
    if not cfg.data.manifest:
        raise UsageError("config data.manifest is required for this command")
    if not cfg.data.annotations:
        raise UsageError("config data.annotations is required for this command")
    seqs = load_manifest_sequences(cfg.data.manifest)
    anns = load_annotations(cfg.data.annotations)
    return seqs, anns


def _anchor_path(cfg: ExperimentConfig, out: Path) -> Path:
    return Path(cfg.anchors.path) if cfg.anchors.path else out / "anchors.json"


def _load_anchors(cfg: ExperimentConfig, out: Path) -> AnchorSet:
    path = _anchor_path(cfg, out)
    if not path.exists():
        raise UsageError(f"anchor file {path} not found; run gen-anchors first")
    return AnchorSet.load(path)


def _checkpoint_path(cfg: ExperimentConfig, out: Path, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    return out / "checkpoint.tnc"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    out = _resolve_out(cfg)
    feat_dir = out / "features"
    feat_dir.mkdir(exist_ok=True)
    seqs, anns = synth_generate(cfg.synth, cfg.seed)
    entries = []
    for seq in seqs:
        path = feat_dir / f"{seq.video_id}.bin"
        save_features_binary(seq, path)
        entries.append(
            ManifestEntry(
                video_id=seq.video_id,
                session_id=seq.session_id,
                feature_path=str(path.relative_to(out)),
                split_tags=[],
            )
        )
    save_manifest(entries, out / "manifest.json")
    save_annotations(anns, out / "annotations.csv")
    # point the emitted config at the generated data so downstream commands
    # (and reruns from the manifest) resolve without editing
    cfg.data.manifest = str(out / "manifest.json")
    cfg.data.annotations = str(out / "annotations.csv")
    _write_run_manifest(cfg, "synth", out)
    print(f"wrote {len(seqs)} videos / {len(anns)} annotations under {out}")
    return 0


def cmd_gen_anchors(cfg: ExperimentConfig, args) -> int:
    from .geometry import build_anchor_set, kmeans_anchors

    out = _resolve_out(cfg)
    if not cfg.data.annotations:
        raise UsageError("config data.annotations is required")
    anns = load_annotations(cfg.data.annotations)
    if not anns:
        raise DataError(f"{cfg.data.annotations}: no annotations")
    durations = [a.interval.length for a in anns]
    centroids = kmeans_anchors(durations, cfg.anchors.k, seed=cfg.anchors.seed)
    aset = build_anchor_set(centroids, LEVEL_STRIDES)
    path = _anchor_path(cfg, out)
    aset.save(path)
    _write_run_manifest(cfg, "gen-anchors", out)
    print("anchor lengths:", " ".join(f"{c:.2f}" for c in centroids))
    print(f"wrote {path}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    from .data import make_windows
    from .engine import fit, save_checkpoint

    out = _resolve_out(cfg)
    seqs, anns = _load_dataset(cfg)
    anchors = _load_anchors(cfg, out)
    samples = []
    for seq in seqs:
        samples.extend(make_windows(seq, anns, cfg.model.window, cfg.model.window // 2))
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    result = fit(samples, anchors, cfg.model, cfg.train, cfg.loss, log_path=log_path)
    ckpt = _checkpoint_path(cfg, out, getattr(args, "checkpoint", None))
    save_checkpoint(result.model, ckpt, meta={"next_epoch": cfg.train.epochs,
                                              "seed": cfg.train.seed})
    _write_run_manifest(cfg, "train", out)
    last = result.records[-1]
    print(f"trained {cfg.train.epochs} epochs; final loss {last['loss_total']:.4f}")
    print(f"wrote {ckpt}")
    return 0


def _load_model(cfg: ExperimentConfig, out: Path, args):
    from .engine import load_checkpoint

    ckpt = _checkpoint_path(cfg, out, getattr(args, "checkpoint", None))
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} not found; run train first")
    bundle = load_checkpoint(ckpt)
    bundle.model.eval()
    return bundle.model


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    from .evalkit import average_precision, detections_to_json, infer_video, pr_curve

    out = _resolve_out(cfg)
    seqs, anns = _load_dataset(cfg)
    anchors = _load_anchors(cfg, out)
    model = _load_model(cfg, out, args)
    dets = []
    for seq in seqs:
        dets.extend(infer_video(model, seq, anchors, cfg.eval))
    ap = average_precision(dets, anns, cfg.eval.iou_thresh, cfg.eval.score_field)
    report = {
        "ap": ap,
        "iou_thresh": cfg.eval.iou_thresh,
        "prob_thresh": cfg.eval.prob_thresh,
        "score_field": cfg.eval.score_field,
        "n_detections": len(dets),
        "n_gts": len(anns),
    }
    with open(out / "eval_report.json", "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    with open(out / "detections.json", "w") as f:
        json.dump(detections_to_json(dets), f, indent=2)
        f.write("\n")
    precision, recall = pr_curve(dets, anns, cfg.eval.iou_thresh, cfg.eval.score_field)
    with open(out / "pr_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["recall", "precision"])
        for r, p in zip(recall, precision):
            w.writerow([f"{r:.6f}", f"{p:.6f}"])
    _write_run_manifest(cfg, "eval", out)
    print(f"AP@{cfg.eval.iou_thresh} = {ap:.4f} ({len(dets)} detections, {len(anns)} gts)")
    return 0


def cmd_infer(cfg: ExperimentConfig, args) -> int:
    from .evalkit import detections_to_json, infer_video

    out = _resolve_out(cfg)
    seqs, _ = _load_dataset(cfg)
    matching = [s for s in seqs if s.video_id == args.video]
    if not matching:
        raise UsageError(f"video {args.video!r} not in manifest")
    anchors = _load_anchors(cfg, out)
    model = _load_model(cfg, out, args)
    dets = infer_video(model, matching[0], anchors, cfg.eval)
    path = out / f"detections_{args.video}.json"
    with open(path, "w") as f:
        json.dump(detections_to_json(dets), f, indent=2)
        f.write("\n")
    _write_run_manifest(cfg, "infer", out)
    print(f"{len(dets)} detections -> {path}")
    return 0


def cmd_explain(cfg: ExperimentConfig, args) -> int:
    from .evalkit import infer_video
    from .explain import grad_cam, heatmap_matrix_csv, save_cam_json

    out = _resolve_out(cfg)
    seqs, _ = _load_dataset(cfg)
    matching = [s for s in seqs if s.video_id == args.video]
    if not matching:
        raise UsageError(f"video {args.video!r} not in manifest")
    seq = matching[0]
    anchors = _load_anchors(cfg, out)
    model = _load_model(cfg, out, args)
    dets = infer_video(model, seq, anchors, cfg.eval)
    if not dets:
        raise DataError(f"no detections on {args.video} at prob {cfg.eval.prob_thresh}")
    if not 0 <= args.detection < len(dets):
        raise UsageError(f"--detection {args.detection} out of range (0..{len(dets) - 1})")
    det = dets[args.detection]
    # attribute on the window that contains the detection center
    window = model.config.window
    w_start = int(min(max(det.interval.center - window / 2, 0), max(seq.frames - window, 0)))
    feats = seq.values[:, w_start : w_start + window]
    if feats.shape[1] < window:
        feats = np.pad(feats, ((0, 0), (0, window - feats.shape[1])))
    local = dc_replace(
        det,
        interval=Interval(det.interval.start - w_start, det.interval.end - w_start),
    )
    result = grad_cam(model, feats, local, target_layer=args.layer)
    save_cam_json(result, out / f"cam_{args.video}_{args.detection}.json")
    heatmap_matrix_csv(result, feats, out / f"cam_{args.video}_{args.detection}.csv")
    _write_run_manifest(cfg, "explain", out)
    print(
        f"cam for {args.video} det#{args.detection} "
        f"[{det.interval.start:.1f}, {det.interval.end:.1f}) -> {out}"
    )
    return 0


def cmd_crossval(cfg: ExperimentConfig, args) -> int:
    from .evalkit import cross_validate

    out = _resolve_out(cfg)
    seqs, anns = _load_dataset(cfg)
    report = cross_validate(
        seqs,
        anns,
        args.strategy,
        cfg.model,
        cfg.train,
        cfg.loss,
        cfg.eval,
        anchor_k=cfg.anchors.k,
        jobs=args.jobs,
    )
    with open(out / "fold_report.json", "w") as f:
        f.write(report.to_json() + "\n")
    for fold in report.folds:
        with open(out / f"pr_fold_{fold.fold_id}.csv", "w") as f:
            f.write(fold.pr_csv())
    _write_run_manifest(cfg, "crossval", out)
    for fold in report.folds:
        print(f"fold {fold.fold_id}: AP = {fold.ap:.4f} (test: {', '.join(fold.test_ids)})")
    print(f"{args.strategy} mean AP = {report.mean_ap:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ticnet",
        description="Temporal event-interval detection on multichannel feature sequences",
    )
    parser.add_argument("--version", action="version", version=f"ticnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=os.environ.get(ENV_CONFIG),
                       help=f"config JSON (default: ${ENV_CONFIG})")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)

    p = sub.add_parser("gen-anchors", help="cluster annotation durations into anchors")
    common(p)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint output path")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the manifest videos")
    common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint to evaluate")

    p = sub.add_parser("infer", help="detect events on one video")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--video", required=True, help="video id from the manifest")

    p = sub.add_parser("explain", help="grad-cam for one detection")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--video", required=True)
    p.add_argument("--detection", type=int, default=0, help="detection index (score order)")
    p.add_argument("--layer", default=None, help="target layer (default: the detection's level)")

    p = sub.add_parser("crossval", help="cross-validate (trains one model per fold)")
    common(p)
    p.add_argument("--strategy", choices=["LOSO", "LOVO"], default="LOVO")
    p.add_argument("--jobs", type=int, default=1, help="parallel folds")

    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "gen-anchors": cmd_gen_anchors,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "explain": cmd_explain,
    "crossval": cmd_crossval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = load_config(args.config)
        else:
            cfg = ExperimentConfig()
        apply_overrides(cfg, seed=args.seed, out_dir=args.out)
        return _COMMANDS[args.command](cfg, args)
    except TicNetError as e:
        print(f"error: {e}", file=sys.stderr)
        for types, code in _EXIT_CODES:
            if isinstance(e, types):
                return code
        return 1


if __name__ == "__main__":
    sys.exit(main())
