"""1D interval geometry: IoU/EIoU, anchor generation and matching, offset
coding, and EIoU-based NMS.

All intervals are half-open ``[start, end)`` in (possibly fractional) frame
units. Everything here is pure numpy/python and reentrant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

# Anchor match status codes.
POSITIVE = 1
NEGATIVE = 0
IGNORED = -1

MATCH_POS_THRESH = 0.3
MATCH_NEG_THRESH = -0.4


@dataclass(frozen=True)
class Interval:
    """Half-open interval [start, end) with end > start."""

    start: float
    end: float

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError(f"degenerate interval [{self.start}, {self.end})")

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass
class Detection:
    """One detected interval with raw and refined probabilities.

    ``anchor_index`` is the flat index (anchor_row * positions + position)
    within ``level``, so the producing logit can be re-identified.
    """

    interval: Interval
    raw_prob: float
    refined_prob: float | None = None
    level: int = -1
    anchor_index: int = -1
    video_id: str = ""

    @property
    def score(self) -> float:
        return self.raw_prob if self.refined_prob is None else self.refined_prob


def iou(a: Interval, b: Interval) -> float:
    """Intersection over union of two intervals, in [0, 1]."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0.0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def eiou(a: Interval, g: Interval) -> float:
    """IoU minus normalized center-distance and length-difference penalties.

    Both penalties are normalized by the squared length of the smallest
    enclosing interval, so the value lies in (-2, 1] and is symmetric.
    """
    d_c = max(a.end, g.end) - min(a.start, g.start)
    pen_center = (a.center - g.center) ** 2 / d_c**2
    pen_length = (a.length - g.length) ** 2 / d_c**2
    return iou(a, g) - pen_center - pen_length


def _eiou_matrix(anchors: list[Interval], gts: list[Interval]) -> np.ndarray:
    """(len(anchors), len(gts)) EIoU matrix, vectorized."""
    a = np.array([[x.start, x.end] for x in anchors], dtype=np.float64)
    g = np.array([[x.start, x.end] for x in gts], dtype=np.float64)
    a_s, a_e = a[:, 0:1], a[:, 1:2]
    g_s, g_e = g[None, :, 0], g[None, :, 1]
    inter = np.maximum(np.minimum(a_e, g_e) - np.maximum(a_s, g_s), 0.0)
    union = (a_e - a_s) + (g_e - g_s) - inter
    d_c = np.maximum(a_e, g_e) - np.minimum(a_s, g_s)
    m_a, m_g = 0.5 * (a_s + a_e), 0.5 * (g_s + g_e)
    d_a, d_g = a_e - a_s, g_e - g_s
    return inter / union - (m_a - m_g) ** 2 / d_c**2 - (d_a - d_g) ** 2 / d_c**2


def kmeans_anchors(
    durations: list[float],
    k: int,
    seed: int = 0,
    init: np.ndarray | None = None,
    max_iter: int = 100,
) -> list[float]:
    """Cluster durations into k anchor lengths via Lloyd's algorithm.

    Runs in log-duration space (lengths span orders of magnitude, so ratio
    similarity is the right metric) with seeded k-means++ initialization on
    the sorted input; centroids come back as exp(mean log), ascending.
    ``init`` overrides initialization with explicit duration-space centroids.
    """
    durs = np.asarray(sorted(durations), dtype=np.float64)
    if durs.size == 0 or np.any(durs <= 0):
        raise ConfigError("durations must be non-empty and positive")
    n_distinct = np.unique(durs).size
    if not 1 <= k <= n_distinct:
        raise ConfigError(f"k={k} outside [1, {n_distinct}] distinct durations")
    x = np.log(durs)

    if init is not None:
        centers = np.log(np.asarray(init, dtype=np.float64))
        if centers.size != k:
            raise ConfigError("init must supply exactly k centroids")
    else:
        rng = np.random.default_rng(seed)
        centers = _kmeanspp(x, k, rng)

    assign = np.full(x.size, -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = (x[:, None] - centers[None, :]) ** 2
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            sel = x[assign == j]
            if sel.size:
                centers[j] = sel.mean()
    return sorted(float(c) for c in np.exp(centers))


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding on 1D points; returns k distinct starting centers."""
    centers = [x[rng.integers(x.size)]]
    while len(centers) < k:
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0.0:
            # remaining mass is on duplicates; fall back to unused distinct values
            unused = np.setdiff1d(np.unique(x), np.array(centers))
            centers.append(unused[rng.integers(unused.size)])
            continue
        centers.append(x[rng.choice(x.size, p=d2 / total)])
    return np.array(centers, dtype=np.float64)


@dataclass
class AnchorSet:
    """Anchor lengths grouped by pyramid level.

    ``levels`` maps each temporal stride (ascending) to the anchor lengths
    placed at every position of that level.
    """

    levels: list[tuple[int, list[float]]] = field(default_factory=list)

    def __post_init__(self):
        strides = [s for s, _ in self.levels]
        if strides != sorted(strides) or len(set(strides)) != len(strides):
            raise ConfigError("level strides must strictly increase")
        flat = [l for _, ls in self.levels for l in ls]
        if any(l <= 0 for l in flat) or flat != sorted(flat):
            raise ConfigError("anchor lengths must be positive and ascending")

    @property
    def strides(self) -> list[int]:
        return [s for s, _ in self.levels]

    @property
    def anchors_per_pos(self) -> int:
        counts = {len(ls) for _, ls in self.levels}
        if len(counts) != 1:
            raise ConfigError("levels carry differing anchor counts")
        return counts.pop()

    def level_anchors(self, level: int, window: int) -> list[Interval]:
        """All anchors of one level, flat order: anchor row major, position minor."""
        stride, lengths = self.levels[level]
        if window % stride:
            raise ConfigError(f"window {window} not divisible by stride {stride}")
        positions = window // stride
        out = []
        for length in lengths:
            for p in range(positions):
                m = (p + 0.5) * stride
                out.append(Interval(m - length / 2.0, m + length / 2.0))
        return out

    def all_anchors(self, window: int) -> list[Interval]:
        return [a for lv in range(len(self.levels)) for a in self.level_anchors(lv, window)]

    def to_json(self) -> str:
        payload = {"levels": [{"stride": s, "lengths": ls} for s, ls in self.levels]}
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AnchorSet":
        payload = json.loads(text)
        return cls(levels=[(int(e["stride"]), [float(x) for x in e["lengths"]]) for e in payload["levels"]])

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "AnchorSet":
        with open(path) as f:
            return cls.from_json(f.read())


def build_anchor_set(centroids: list[float], level_strides: list[int]) -> AnchorSet:
    """Partition sorted centroids contiguously across levels, smallest group
    to the finest (smallest-stride) level."""
    if len(centroids) % len(level_strides):
        raise ConfigError(
            f"{len(centroids)} centroids not divisible by {len(level_strides)} levels"
        )
    per = len(centroids) // len(level_strides)
    cs = sorted(float(c) for c in centroids)
    levels = [
        (stride, cs[i * per : (i + 1) * per])
        for i, stride in enumerate(sorted(level_strides))
    ]
    return AnchorSet(levels=levels)


@dataclass
class MatchResult:
    """Per-anchor match outcome.

    ``status[i]`` is POSITIVE/NEGATIVE/IGNORED; ``gt_index[i]`` is the matched
    ground-truth index where positive, -1 elsewhere.
    """

    status: np.ndarray
    gt_index: np.ndarray

    @property
    def num_positive(self) -> int:
        return int(np.sum(self.status == POSITIVE))


def match_anchors(anchors: list[Interval], gts: list[Interval]) -> MatchResult:
    """Label anchors against ground truths by max EIoU.

    Positive above MATCH_POS_THRESH (argmax gt), negative below
    MATCH_NEG_THRESH, ignored in between; each gt's best anchor is then
    forced positive so no gt goes unsupervised.
    """
    n = len(anchors)
    if not gts:
        return MatchResult(
            status=np.full(n, NEGATIVE, dtype=np.int8),
            gt_index=np.full(n, -1, dtype=np.int64),
        )
    mat = _eiou_matrix(anchors, gts)
    best_gt = np.argmax(mat, axis=1)
    best_val = mat[np.arange(n), best_gt]

    status = np.full(n, IGNORED, dtype=np.int8)
    status[best_val > MATCH_POS_THRESH] = POSITIVE
    status[best_val < MATCH_NEG_THRESH] = NEGATIVE
    gt_index = np.where(status == POSITIVE, best_gt, -1)

    # Each gt keeps its single best anchor even if below the threshold.
    for j in range(len(gts)):
        i = int(np.argmax(mat[:, j]))
        status[i] = POSITIVE
        gt_index[i] = j
    return MatchResult(status=status, gt_index=gt_index)


def encode_offsets(gt: Interval, anchor: Interval) -> tuple[float, float]:
    """(dm, dd): center shift in anchor lengths, log length ratio."""
    dm = (gt.center - anchor.center) / anchor.length
    dd = math.log(gt.length / anchor.length)
    return dm, dd


def decode_offsets(
    dm: float, dd: float, anchor: Interval, clamp_to: float | None = None
) -> Interval | None:
    """Invert encode_offsets. With ``clamp_to`` = T, clip to [0, T); returns
    None if the decoded interval falls entirely outside the window."""
    m = anchor.center + dm * anchor.length
    d = anchor.length * math.exp(dd)
    start, end = m - d / 2.0, m + d / 2.0
    if clamp_to is not None:
        start, end = max(0.0, start), min(float(clamp_to), end)
        if end <= start:
            return None
    return Interval(start, end)


def nms_eiou(dets: list[Detection], threshold: float, score_field: str = "auto") -> list[Detection]:
    """Greedy NMS: keep the best-scoring detection, suppress remaining ones
    with EIoU > threshold against any kept one.

    Ties are broken deterministically: higher score, then earlier start, then
    smaller original index. ``score_field`` picks the ranking probability
    ("raw", "refined", or "auto" = refined when present).
    """
    scored = [(_det_score(d, score_field), d.interval.start, i) for i, d in enumerate(dets)]
    order = sorted(range(len(dets)), key=lambda i: (-scored[i][0], scored[i][1], i))
    kept: list[int] = []
    for i in order:
        di = dets[i].interval
        if all(eiou(di, dets[j].interval) <= threshold for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def _det_score(d: Detection, score_field: str) -> float:
    if score_field == "raw":
        return d.raw_prob
    if score_field == "refined":
        if d.refined_prob is None:
            raise ConfigError("detection has no refined probability")
        return d.refined_prob
    return d.score
