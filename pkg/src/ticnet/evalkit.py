"""Full-video inference (window merge + global NMS), average precision, and
LOSO/LOVO cross-validation."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
import torch

from .data import Annotation, FeatureSequence, make_windows
from .engine import TrainConfig, fit
from .errors import ConfigError, FoldError
from .geometry import Detection, Interval, build_anchor_set, iou, kmeans_anchors, nms_eiou
from .losses import LossConfig
from .model import LEVEL_STRIDES, ModelConfig, TicNet, detect_window


@dataclass
class EvalProtocol:
    iou_thresh: float = 0.5
    prob_thresh: float = 0.2
    nms_eiou_thresh: float = 0.2
    score_field: str = "refined"  # refined | raw

    def __post_init__(self):
        if not 0.0 <= self.iou_thresh <= 1.0 or not 0.0 <= self.prob_thresh <= 1.0:
            raise ConfigError("iou_thresh and prob_thresh must lie in [0, 1]")
        if not -2.0 < self.nms_eiou_thresh <= 1.0:
            raise ConfigError("nms_eiou_thresh must lie in (-2, 1]")
        if self.score_field not in ("refined", "raw"):
            raise ConfigError(f"unknown score_field {self.score_field!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalProtocol":
        return cls(**d)


def _det_score(d: Detection, score_field: str) -> float:
    # "refined" falls back to raw when no fusion output is attached
    return d.raw_prob if score_field == "raw" else d.score


def infer_video(model: TicNet, seq: FeatureSequence, anchors, protocol: EvalProtocol) -> list[Detection]:
    """Detect over sliding windows, merge into video frames, and apply one
    global EIoU NMS ranked by the protocol's score field."""
    window = model.config.window
    pooled: list[Detection] = []
    for ws in make_windows(seq, [], window, window // 2):
        for d in detect_window(model, ws.features, anchors, protocol.prob_thresh):
            start = d.interval.start + ws.start
            end = d.interval.end + ws.start
            start, end = max(0.0, start), min(float(seq.frames), end)
            if end <= start:
                continue
            if _det_score(d, protocol.score_field) < protocol.prob_thresh:
                continue
            pooled.append(dc_replace(d, interval=Interval(start, end), video_id=seq.video_id))
    return nms_eiou(pooled, protocol.nms_eiou_thresh, score_field=protocol.score_field)


def _sorted_dets(dets: list[Detection], score_field: str) -> list[Detection]:
    keyed = sorted(
        range(len(dets)),
        key=lambda i: (
            -_det_score(dets[i], score_field),
            dets[i].video_id,
            dets[i].interval.start,
            dets[i].interval.end,
            i,
        ),
    )
    return [dets[i] for i in keyed]


def match_detections(
    dets: list[Detection], gts: list[Annotation], iou_thresh: float, score_field: str = "refined"
) -> np.ndarray:
    """Greedy 1:1 matching in score order; returns a TP/FP flag per detection
    (in the same score order as pr_curve/average_precision use)."""
    by_video: dict[str, list[Annotation]] = {}
    for g in gts:
        by_video.setdefault(g.video_id, []).append(g)
    taken: dict[str, np.ndarray] = {v: np.zeros(len(gl), dtype=bool) for v, gl in by_video.items()}
    flags = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(_sorted_dets(dets, score_field)):
        cand = by_video.get(d.video_id, [])
        best_j, best_iou = -1, 0.0
        for j, g in enumerate(cand):
            if taken[d.video_id][j]:
                continue
            v = iou(d.interval, g.interval)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou > iou_thresh:
            taken[d.video_id][best_j] = True
            flags[i] = True
    return flags


def pr_curve(dets, gts, iou_thresh: float, score_field: str = "refined"):
    """Cumulative (precision, recall) arrays in descending score order."""
    flags = match_detections(dets, gts, iou_thresh, score_field)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / max(len(gts), 1)
    return precision, recall


def average_precision(
    dets: list[Detection], gts: list[Annotation], iou_thresh: float = 0.5,
    score_field: str = "refined",
) -> float:
    """Area under the all-point-interpolated precision-recall curve, with
    greedy 1:1 IoU matching per video."""
    if not gts:
        return 1.0 if not dets else 0.0
    if not dets:
        return 0.0
    precision, recall = pr_curve(dets, gts, iou_thresh, score_field)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold_id: str
    test_ids: list[str]
    ap: float
    n_test_gts: int = 0
    n_detections: int = 0
    extra_aps: dict = field(default_factory=dict)
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)

    def pr_csv(self) -> str:
        lines = ["recall,precision"]
        lines += [f"{r:.6f},{p:.6f}" for r, p in zip(self.recall, self.precision)]
        return "\n".join(lines) + "\n"


@dataclass
class FoldReport:
    strategy: str
    folds: list[FoldResult] = field(default_factory=list)
    mean_ap: float = 0.0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "folds": [
                {
                    "fold_id": f.fold_id,
                    "test_ids": f.test_ids,
                    "ap": f.ap,
                    "n_test_gts": f.n_test_gts,
                    "n_detections": f.n_detections,
                    **({"extra_aps": f.extra_aps} if f.extra_aps else {}),
                }
                for f in self.folds
            ],
            "mean_ap": self.mean_ap,
            **(
                {"extra_mean_aps": {
                    k: float(np.mean([f.extra_aps[k] for f in self.folds]))
                    for k in self.folds[0].extra_aps
                }}
                if self.folds and self.folds[0].extra_aps
                else {}
            ),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def make_folds(sequences: list[FeatureSequence], strategy: str) -> list[tuple[str, list[str]]]:
    """(fold_id, held-out video ids) pairs: one per session (LOSO) or one
    per video (LOVO)."""
    if strategy == "LOVO":
        return [(s.video_id, [s.video_id]) for s in sorted(sequences, key=lambda s: s.video_id)]
    if strategy == "LOSO":
        sessions: dict[str, list[str]] = {}
        for s in sequences:
            sessions.setdefault(s.session_id, []).append(s.video_id)
        return [(sid, sorted(vids)) for sid, vids in sorted(sessions.items())]
    raise ConfigError(f"unknown strategy {strategy!r} (expected LOSO or LOVO)")


def fold_seed(base_seed: int, fold_idx: int) -> int:
    return (base_seed * 100003 + 7919 * fold_idx) % (2**31)


def train_anchor_set(anns: list[Annotation], k: int, seed: int, levels=None):
    durations = [a.interval.length for a in anns]
    centroids = kmeans_anchors(durations, k, seed=seed)
    return build_anchor_set(centroids, levels or LEVEL_STRIDES)


def _run_fold(args) -> FoldResult:
    (fold_id, test_ids, sequences, annotations, model_cfg, train_cfg, loss_cfg,
     protocol, anchor_k, threads, extra_protocols) = args
    if threads:
        torch.set_num_threads(threads)
    test_set = set(test_ids)
    train_seqs = [s for s in sequences if s.video_id not in test_set]
    test_seqs = [s for s in sequences if s.video_id in test_set]
    train_anns = [a for a in annotations if a.video_id not in test_set]
    test_anns = [a for a in annotations if a.video_id in test_set]
    if not train_seqs or not train_anns:
        raise FoldError(f"fold {fold_id}: no training annotations")

    anchors = train_anchor_set(train_anns, anchor_k, seed=train_cfg.seed)
    samples = []
    for s in train_seqs:
        samples.extend(make_windows(s, train_anns, model_cfg.window, model_cfg.window // 2))
    result = fit(samples, anchors, model_cfg, train_cfg, loss_cfg)

    def eval_protocol(proto: EvalProtocol):
        dets: list[Detection] = []
        for s in test_seqs:
            dets.extend(infer_video(result.model, s, anchors, proto))
        ap = average_precision(dets, test_anns, proto.iou_thresh, proto.score_field)
        return ap, dets

    ap, dets = eval_protocol(protocol)
    extra = {name: eval_protocol(p)[0] for name, p in (extra_protocols or {}).items()}
    precision, recall = pr_curve(dets, test_anns, protocol.iou_thresh, protocol.score_field)
    return FoldResult(
        fold_id=fold_id,
        test_ids=list(test_ids),
        ap=ap,
        n_test_gts=len(test_anns),
        n_detections=len(dets),
        extra_aps=extra,
        precision=[float(p) for p in precision],
        recall=[float(r) for r in recall],
    )


def cross_validate(
    sequences: list[FeatureSequence],
    annotations: list[Annotation],
    strategy: str,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    protocol: EvalProtocol | None = None,
    anchor_k: int = 12,
    jobs: int = 1,
    extra_protocols: dict[str, EvalProtocol] | None = None,
) -> FoldReport:
    """Train/evaluate one model per fold; every fold trains from scratch with
    a fold-local seed and fold-local (training-split) anchors.

    ``extra_protocols`` scores each fold's model under additional evaluation
    protocols (e.g. raw vs refined ranking) without retraining.
    """
    loss_cfg = loss_cfg or LossConfig()
    protocol = protocol or EvalProtocol()
    folds = make_folds(sequences, strategy)
    if len(folds) < 2:
        raise FoldError(f"{strategy} needs at least 2 folds, got {len(folds)}")

    tasks = []
    for idx, (fold_id, test_ids) in enumerate(folds):
        cfg_f = TrainConfig(**{**train_cfg.to_dict(), "seed": fold_seed(train_cfg.seed, idx)})
        threads = max(1, torch.get_num_threads() // jobs) if jobs > 1 else 0
        tasks.append((fold_id, test_ids, sequences, annotations, model_cfg, cfg_f,
                      loss_cfg, protocol, anchor_k, threads, extra_protocols))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    mean_ap = float(np.mean([r.ap for r in results]))
    return FoldReport(strategy=strategy, folds=results, mean_ap=mean_ap)


def detections_to_json(dets: list[Detection]) -> list[dict]:
    return [
        {
            "video_id": d.video_id,
            "start": d.interval.start,
            "end": d.interval.end,
            "raw_prob": d.raw_prob,
            "refined_prob": d.refined_prob,
            "level": d.level,
        }
        for d in dets
    ]


def detections_from_json(payload: list[dict]) -> list[Detection]:
    return [
        Detection(
            interval=Interval(e["start"], e["end"]),
            raw_prob=e["raw_prob"],
            refined_prob=e.get("refined_prob"),
            level=e.get("level", -1),
            video_id=e.get("video_id", ""),
        )
        for e in payload
    ]
