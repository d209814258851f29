"""Feature/annotation ingestion, sliding-window construction, augmentation,
and the synthetic dataset generator used for desk-scale experiments.

Feature files hold one row per frame (CSV) or a "TNF1" binary container;
annotation CSVs carry inclusive integer frame pairs which become half-open
intervals on load. All randomness takes an explicit seed or Generator.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, GenerationError, ParseError
from .geometry import Interval

DEFAULT_WINDOW = 416
DEFAULT_STRIDE = DEFAULT_WINDOW // 2
NOISE_SIGMA = 0.01
NOISE_PROB = 0.5

_BIN_MAGIC = b"TNF1"


@dataclass
class FeatureSequence:
    """Per-frame feature matrix for one video, rows = channels."""

    video_id: str
    session_id: str
    values: np.ndarray  # (C, L) float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise DataError(f"{self.video_id}: feature matrix must be C x L with C, L >= 1")
        if not np.isfinite(self.values).all():
            raise DataError(f"{self.video_id}: non-finite feature values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Annotation:
    """One ground-truth event interval on a video, frame units."""

    video_id: str
    interval: Interval


@dataclass
class WindowSample:
    """One fixed-length training window cut from a video.

    ``gt_intervals`` are window-local and clipped; ``frame_labels[j]`` is 1
    iff frame j is covered by some gt interval; frames >= ``valid_len`` are
    zero padding.
    """

    video_id: str
    start: int
    features: np.ndarray  # (C, T) float32
    frame_labels: np.ndarray  # (T,) uint8
    gt_intervals: list[Interval] = field(default_factory=list)
    valid_len: int = -1

    def __post_init__(self):
        if self.valid_len < 0:
            self.valid_len = self.features.shape[1]


def load_features(path, fmt: str = "auto", video_id: str | None = None,
                  session_id: str = "") -> FeatureSequence:
    """Read a feature file into a FeatureSequence.

    CSV: one row per frame, C columns, optional header. Binary: "TNF1" magic,
    u32 C, u64 L (little-endian), then C*L float32 values frame-major.
    """
    path = Path(path)
    vid = video_id if video_id is not None else path.stem
    if fmt == "auto":
        fmt = "binary" if path.suffix in (".bin", ".tnf") else "csv"
    if fmt == "binary":
        values = _read_binary_features(path)
    elif fmt == "csv":
        values = _read_csv_features(path)
    else:
        raise ParseError(f"unknown feature format {fmt!r}")
    if values.shape[1] == 0:
        raise DataError(f"{path}: empty feature file")
    bad = ~np.isfinite(values)
    if bad.any():
        frame = int(np.argwhere(bad.any(axis=0))[0][0])
        raise DataError(f"{path}: non-finite value at frame {frame}")
    return FeatureSequence(video_id=vid, session_id=session_id, values=values)


def _read_csv_features(path: Path) -> np.ndarray:
    rows: list[list[float]] = []
    width = None
    with open(path, newline="") as f:
        for idx, row in enumerate(csv.reader(f)):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if idx == 0 and not _is_numeric_row(row):
                continue  # header
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"{path}: row {idx} has {len(row)} columns, expected {width}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as e:
                raise ParseError(f"{path}: row {idx}: {e}") from None
    if not rows:
        raise DataError(f"{path}: empty feature file")
    return np.asarray(rows, dtype=np.float32).T  # (C, L)


def _is_numeric_row(row: list[str]) -> bool:
    try:
        for v in row:
            float(v)
    except ValueError:
        return False
    return True


def _read_binary_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _BIN_MAGIC:
        raise ParseError(f"{path}: bad magic, not a TNF1 feature file")
    channels, frames = struct.unpack_from("<IQ", raw, 4)
    expected = 16 + 4 * channels * frames
    if len(raw) != expected:
        raise ParseError(f"{path}: truncated payload ({len(raw)} vs {expected} bytes)")
    flat = np.frombuffer(raw, dtype="<f4", offset=16)
    return flat.reshape(frames, channels).T.copy()


def save_features_binary(seq: FeatureSequence, path) -> None:
    """Write the binary feature container (frame-major float32)."""
    header = _BIN_MAGIC + struct.pack("<IQ", seq.channels, seq.frames)
    payload = np.ascontiguousarray(seq.values.T, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_annotations(path) -> list[Annotation]:
    """Read the annotation CSV (video_id, start_frame, end_frame inclusive)
    into half-open intervals, sorted by video then start."""
    path = Path(path)
    out: list[Annotation] = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"video_id", "start_frame", "end_frame"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ParseError(f"{path}: header must contain {sorted(required)}")
        for idx, row in enumerate(reader):
            try:
                start = int(row["start_frame"])
                end = int(row["end_frame"])
            except (TypeError, ValueError):
                raise ParseError(f"{path}: row {idx}: non-integer frame") from None
            if end < start:
                raise DataError(f"{path}: row {idx}: end_frame {end} < start_frame {start}")
            if start < 0:
                raise DataError(f"{path}: row {idx}: negative start_frame")
            out.append(Annotation(row["video_id"], Interval(float(start), float(end + 1))))
    out.sort(key=lambda a: (a.video_id, a.interval.start, a.interval.end))
    return out


def save_annotations(anns: list[Annotation], path) -> None:
    """Write annotations back to the inclusive-frame CSV format."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["video_id", "start_frame", "end_frame"])
        for a in anns:
            w.writerow([a.video_id, int(a.interval.start), int(a.interval.end) - 1])


def window_starts(frames: int, window: int, stride: int) -> list[int]:
    """Start offsets for the overlapping sliding windows over one video."""
    if window < 1 or not 1 <= stride <= window:
        raise ValueError("need window >= 1 and 1 <= stride <= window")
    if frames <= window:
        return [0]
    starts = list(range(0, frames - window + 1, stride))
    if starts[-1] != frames - window:
        starts.append(frames - window)
    return starts


def labels_from_intervals(intervals: list[Interval], window: int) -> np.ndarray:
    """Binary per-frame labels: 1 iff frame [j, j+1) intersects an interval."""
    labels = np.zeros(window, dtype=np.uint8)
    for iv in intervals:
        lo = max(0, int(math.floor(iv.start)))
        hi = min(window, int(math.ceil(iv.end)))
        for j in range(lo, hi):
            if max(j, iv.start) < min(j + 1, iv.end):
                labels[j] = 1
    return labels


def make_windows(
    seq: FeatureSequence,
    anns: list[Annotation],
    window: int = DEFAULT_WINDOW,
    stride: int = DEFAULT_STRIDE,
) -> list[WindowSample]:
    """Cut one video into fixed-length windows with window-local targets.

    Short videos are right-padded with zeros (valid_len keeps the true
    length). Annotations intersecting a window are clipped to it; clips
    shorter than one frame are dropped.
    """
    ivs = [a.interval for a in anns if a.video_id == seq.video_id]
    samples = []
    for start in window_starts(seq.frames, window, stride):
        feats = seq.values[:, start : start + window]
        valid = feats.shape[1]
        if valid < window:
            feats = np.pad(feats, ((0, 0), (0, window - valid)))
        local = []
        for iv in ivs:
            s = max(iv.start, float(start)) - start
            e = min(iv.end, float(start + window)) - start
            if e - s >= 1.0:
                local.append(Interval(s, e))
        samples.append(
            WindowSample(
                video_id=seq.video_id,
                start=start,
                features=np.ascontiguousarray(feats, dtype=np.float32),
                frame_labels=labels_from_intervals(local, window),
                gt_intervals=local,
                valid_len=valid,
            )
        )
    return samples


def augment_noise(
    sample: WindowSample,
    sigma: float = NOISE_SIGMA,
    prob: float = NOISE_PROB,
    rng: np.random.Generator | int = 0,
) -> WindowSample:
    """With probability ``prob``, add iid zero-mean Gaussian noise (std
    ``sigma``) to every feature entry; labels and intervals are untouched."""
    if sigma < 0 or not 0.0 <= prob <= 1.0:
        raise ValueError("need sigma >= 0 and prob in [0, 1]")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if sigma == 0.0 or prob == 0.0 or rng.random() >= prob:
        return replace(sample, features=sample.features.copy())
    noise = rng.normal(0.0, sigma, size=sample.features.shape).astype(np.float32)
    return replace(sample, features=sample.features + noise)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

# Log-normal duration parameters solved from the target median (32 frames,
# giving mu) and mean (41.15 frames, giving sigma).
DURATION_MEAN = 41.15
DURATION_MEDIAN = 32.0
_DUR_MU = math.log(DURATION_MEDIAN)
_DUR_SIGMA = math.sqrt(2.0 * math.log(DURATION_MEAN / DURATION_MEDIAN))


@dataclass
class SynthConfig:
    """Knobs for the synthetic corpus; defaults mirror the desk-scale setup."""

    n_videos: int = 12
    frames: int = 4500
    channels: int = 17
    sessions: int = 4
    event_rate: float = 1.0 / 150.0  # expected events per frame
    amp_lo: float = 0.6
    amp_hi: float = 1.4
    background_sigma: float = 0.05
    drift_amp: float = 0.1
    min_gap: int = 8
    min_channels: int = 2
    max_channels: int = 5


def sample_durations(n: int, rng: np.random.Generator | int) -> np.ndarray:
    """Draw n event durations (frames) from the calibrated log-normal,
    clipped to [2, 416]."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    d = rng.lognormal(_DUR_MU, _DUR_SIGMA, size=n)
    return np.clip(d, 2.0, 416.0)


def synth_generate(
    config: SynthConfig, seed: int
) -> tuple[list[FeatureSequence], list[Annotation]]:
    """Generate videos of drifting low-amplitude noise with raised-cosine
    events on a few channels; annotations exactly match the injected events."""
    rng = np.random.default_rng(seed)
    seqs: list[FeatureSequence] = []
    anns: list[Annotation] = []
    per_session = max(1, math.ceil(config.n_videos / config.sessions))
    for v in range(config.n_videos):
        video_id = f"synth{v:02d}"
        session_id = f"sess{v // per_session}"
        values = _background(config, rng)
        n_events = int(round(config.event_rate * config.frames))
        events = _place_events(config, n_events, rng, video_id)
        for start, dur in events:
            n_ch = rng.integers(config.min_channels, config.max_channels + 1)
            chans = rng.choice(config.channels, size=n_ch, replace=False)
            envelope = _raised_cosine(dur)
            for c in chans:
                amp = rng.uniform(config.amp_lo, config.amp_hi)
                values[c, start : start + dur] += amp * envelope
            anns.append(Annotation(video_id, Interval(float(start), float(start + dur))))
        seqs.append(FeatureSequence(video_id, session_id, values))
    anns.sort(key=lambda a: (a.video_id, a.interval.start))
    return seqs, anns


def _background(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(config.frames, dtype=np.float64)
    values = rng.normal(0.0, config.background_sigma, size=(config.channels, config.frames))
    # slow per-channel drift: two incommensurate sinusoids with random phase
    for c in range(config.channels):
        f1, f2 = rng.uniform(0.5, 2.0, size=2)
        p1, p2 = rng.uniform(0.0, 2 * math.pi, size=2)
        drift = np.sin(2 * math.pi * f1 * t / config.frames + p1)
        drift += 0.5 * np.sin(2 * math.pi * f2 * t / (config.frames / 3.0) + p2)
        values[c] += config.drift_amp * drift
    return values.astype(np.float32)


def _raised_cosine(dur: int) -> np.ndarray:
    x = (np.arange(dur) + 0.5) / dur
    return 0.5 * (1.0 - np.cos(2 * math.pi * x))


def _place_events(
    config: SynthConfig, n_events: int, rng: np.random.Generator, video_id: str
) -> list[tuple[int, int]]:
    """Sample (start, duration) pairs that do not overlap (min_gap apart)."""
    if n_events == 0:
        return []
    durations = np.maximum(2, np.round(sample_durations(n_events, rng)).astype(int))
    durations = np.sort(durations)[::-1]  # place long events while space is plentiful
    placed: list[tuple[int, int]] = []
    attempts_left = 200 * n_events
    for dur in durations:
        dur = int(min(dur, config.frames - 2))
        ok = False
        while attempts_left > 0:
            attempts_left -= 1
            start = int(rng.integers(0, config.frames - dur))
            lo, hi = start - config.min_gap, start + dur + config.min_gap
            if all(e <= lo or s >= hi for s, e in ((s, s + d) for s, d in placed)):
                placed.append((start, dur))
                ok = True
                break
        if not ok:
            raise GenerationError(
                f"{video_id}: could not place {n_events} non-overlapping events "
                f"in {config.frames} frames"
            )
    placed.sort()
    return placed


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    video_id: str
    session_id: str
    feature_path: str
    split_tags: list[str] = field(default_factory=list)


def save_manifest(entries: list[ManifestEntry], path) -> None:
    payload = [
        {
            "video_id": e.video_id,
            "session_id": e.session_id,
            "feature_path": e.feature_path,
            "split_tags": e.split_tags,
        }
        for e in entries
    ]
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def load_manifest(path) -> list[ManifestEntry]:
    with open(path) as f:
        payload = json.load(f)
    if not isinstance(payload, list):
        raise ParseError(f"{path}: manifest must be a JSON list")
    return [
        ManifestEntry(
            video_id=e["video_id"],
            session_id=e["session_id"],
            feature_path=e["feature_path"],
            split_tags=list(e.get("split_tags", [])),
        )
        for e in payload
    ]


def load_manifest_sequences(path) -> list[FeatureSequence]:
    """Resolve a manifest into FeatureSequences (paths relative to it)."""
    base = Path(path).parent
    seqs = []
    for e in load_manifest(path):
        p = Path(e.feature_path)
        if not p.is_absolute():
            p = base / p
        seqs.append(load_features(p, video_id=e.video_id, session_id=e.session_id))
    return seqs
