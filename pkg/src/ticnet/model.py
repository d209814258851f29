"""The detection network: temporal ResNet-18 encoder, 4-level temporal FPN
detection branch with a shared two-branch head, 3-stage temporal UNet3+-style
segmentation decoder with full-scale skips, and an RoIPool+MLP score fusion
head. Supports a shared encoder or independent per-branch encoders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError, ShapeError
from .geometry import AnchorSet, Detection, Interval, decode_offsets

LEVEL_STRIDES = [4, 8, 16, 32]


@dataclass
class ModelConfig:
    channels: int = 17
    window: int = 416
    base_width: int = 64
    fpn_width: int = 128
    seg_width: int = 64
    mlp_hidden: int = 32
    roi_bins: int = 16
    anchors_per_pos: int = 3
    variant: str = "shared"  # shared | independent
    norm: str = "batch"  # batch | instance
    head_prior: float = 0.01

    def __post_init__(self):
        if self.window % LEVEL_STRIDES[-1]:
            raise ConfigError(f"window {self.window} not divisible by {LEVEL_STRIDES[-1]}")
        if self.variant not in ("shared", "independent"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.norm not in ("batch", "instance"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if min(self.channels, self.base_width, self.anchors_per_pos, self.roi_bins) < 1:
            raise ConfigError("channels, widths, anchors_per_pos, roi_bins must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def reduced_config(**overrides) -> ModelConfig:
    """Small config (C=4, T=64, widths / 8) used by gradient verification."""
    base = dict(channels=4, window=64, base_width=8, fpn_width=16, seg_width=8, mlp_hidden=4)
    base.update(overrides)
    return ModelConfig(**base)


def _make_norm(kind: str, ch: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm1d(ch, affine=True, track_running_stats=False)
    return nn.BatchNorm1d(ch)


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride, norm):
        super().__init__()
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = _make_norm(norm, out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = _make_norm(norm, out_ch)
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv1d(in_ch, out_ch, 1, stride=stride, bias=False),
                _make_norm(norm, out_ch),
            )
        else:
            self.down = None

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.down is None else self.down(x)
        return F.relu(out + skip)


class Encoder(nn.Module):
    """Temporal ResNet-18: 7-wide stem (stride 2) + max-pool, then four
    two-block residual stages at widths w/2w/4w/8w, strides 1/2/2/2."""

    def __init__(self, channels, width, norm):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv1d(channels, width, 7, stride=2, padding=3, bias=False),
            _make_norm(norm, width),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool1d(3, stride=2, padding=1)
        widths = [width, 2 * width, 4 * width, 8 * width]
        strides = [1, 2, 2, 2]
        stages = []
        in_ch = width
        for w, s in zip(widths, strides):
            stages.append(
                nn.Sequential(BasicBlock(in_ch, w, s, norm), BasicBlock(w, w, 1, norm))
            )
            in_ch = w
        self.stages = nn.ModuleList(stages)
        self.stage_widths = widths

    def forward(self, x):
        c0 = self.stem(x)  # T/2, pre-pool
        h = self.pool(c0)
        feats = [c0]
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats  # [c0 @T/2, c1 @T/4, c2 @T/8, c3 @T/16, c4 @T/32]


class FPN(nn.Module):
    """Lateral 1x1 convs + top-down nearest upsampling + 3-wide smoothing."""

    def __init__(self, in_widths, out_width):
        super().__init__()
        self.laterals = nn.ModuleList(nn.Conv1d(w, out_width, 1) for w in in_widths)
        self.smooths = nn.ModuleList(
            nn.Conv1d(out_width, out_width, 3, padding=1) for _ in in_widths
        )

    def forward(self, feats):
        laterals = [l(f) for l, f in zip(self.laterals, feats)]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(laterals[i + 1], scale_factor=2, mode="nearest")
        return [s(l) for s, l in zip(self.smooths, laterals)]  # finest first


class DetHead(nn.Module):
    """Two single conv layers shared across pyramid levels: classification
    logits (A per position) and offsets (2A per position)."""

    def __init__(self, fpn_width, anchors_per_pos):
        super().__init__()
        self.anchors_per_pos = anchors_per_pos
        self.cls = nn.Conv1d(fpn_width, anchors_per_pos, 3, padding=1)
        self.reg = nn.Conv1d(fpn_width, 2 * anchors_per_pos, 3, padding=1)

    def forward(self, level_feats):
        logits, offsets = [], []
        for f in level_feats:
            b, _, p = f.shape
            logits.append(self.cls(f))  # (B, A, P)
            offsets.append(self.reg(f).view(b, self.anchors_per_pos, 2, p))
        return logits, offsets


class _Adapter(nn.Module):
    """Rescale a source map to the target scale (max-pool down, linear up)
    then project with a 3-wide conv."""

    def __init__(self, in_ch, out_ch, src_factor, dst_factor, norm):
        super().__init__()
        if src_factor < dst_factor:
            r = dst_factor // src_factor
            self.resize = nn.MaxPool1d(r, stride=r)
        elif src_factor > dst_factor:
            self.scale = src_factor // dst_factor
            self.resize = None
        else:
            self.resize = nn.Identity()
        self.conv = nn.Conv1d(in_ch, out_ch, 3, padding=1, bias=False)
        self.bn = _make_norm(norm, out_ch)

    def forward(self, x):
        if self.resize is None:
            x = F.interpolate(x, scale_factor=self.scale, mode="linear", align_corners=False)
        else:
            x = self.resize(x)
        return F.relu(self.bn(self.conv(x)))


class SegDecoder(nn.Module):
    """Three decoder stages (T/8, T/4, T/2) that each aggregate scale-adapted
    maps from the first three encoder outputs plus all deeper decoder
    outputs, UNet3+-style, with a per-stage side head producing a full-length
    probability sequence."""

    # (encoder index into Encoder feats, downsample factor of that map)
    ENC_SOURCES = [(0, 2), (1, 4), (2, 8)]
    STAGE_FACTORS = [8, 4, 2]  # deepest first: Seg3, Seg2, Seg1

    def __init__(self, enc_widths, seg_width, norm):
        super().__init__()
        src_widths = [enc_widths[i] for i, _ in self.ENC_SOURCES]
        self.enc_adapters = nn.ModuleList()
        self.dec_adapters = nn.ModuleList()
        self.fuses = nn.ModuleList()
        self.side_heads = nn.ModuleList()
        for si, dst in enumerate(self.STAGE_FACTORS):
            self.enc_adapters.append(
                nn.ModuleList(
                    _Adapter(w, seg_width, src, dst, norm)
                    for w, (_, src) in zip(src_widths, self.ENC_SOURCES)
                )
            )
            # one adapter per deeper (already computed) decoder stage
            self.dec_adapters.append(
                nn.ModuleList(
                    _Adapter(seg_width, seg_width, self.STAGE_FACTORS[d], dst, norm)
                    for d in range(si)
                )
            )
            n_in = len(self.ENC_SOURCES) + si
            self.fuses.append(
                nn.Sequential(
                    nn.Conv1d(n_in * seg_width, seg_width, 3, padding=1, bias=False),
                    _make_norm(norm, seg_width),
                    nn.ReLU(inplace=True),
                )
            )
            self.side_heads.append(nn.Conv1d(seg_width, 1, 1))

    def forward(self, enc_feats, window):
        src_maps = [enc_feats[i] for i, _ in self.ENC_SOURCES]
        stage_outs = []
        side_probs = []
        for si in range(len(self.STAGE_FACTORS)):
            parts = [ad(m) for ad, m in zip(self.enc_adapters[si], src_maps)]
            parts += [ad(o) for ad, o in zip(self.dec_adapters[si], stage_outs)]
            fused = self.fuses[si](torch.cat(parts, dim=1))
            stage_outs.append(fused)
            side = self.side_heads[si](fused)
            side = F.interpolate(side, size=window, mode="linear", align_corners=False)
            side_probs.append(torch.sigmoid(side.squeeze(1)))  # (B, T)
        # stage order here is Seg3, Seg2, Seg1; report finest first (P^1..P^3)
        return torch.stack(side_probs[::-1], dim=1)  # (B, 3, T)


class FusionMLP(nn.Module):
    """Refines a detection probability from RoI-pooled segmentation bins
    concatenated with the raw probability."""

    def __init__(self, bins, hidden):
        super().__init__()
        self.fc1 = nn.Linear(bins + 1, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x):
        return torch.sigmoid(self.fc2(F.relu(self.fc1(x)))).squeeze(-1)


@dataclass
class NetOutputs:
    """Raw per-window model outputs.

    det_logits[l]: (A, P_l) classification logits; det_offsets[l]:
    (A, 2, P_l) regression offsets; seg_probs: (3, T) framewise
    probabilities, finest stage first.
    """

    det_logits: list[torch.Tensor]
    det_offsets: list[torch.Tensor]
    seg_probs: torch.Tensor


class TicNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config.channels, config.base_width, config.norm)
        if config.variant == "independent":
            self.encoder_seg = Encoder(config.channels, config.base_width, config.norm)
        else:
            self.encoder_seg = None
        self.fpn = FPN(self.encoder.stage_widths, config.fpn_width)
        self.head = DetHead(config.fpn_width, config.anchors_per_pos)
        seg_in = [config.base_width] + self.encoder.stage_widths
        self.seg_decoder = SegDecoder(seg_in, config.seg_width, config.norm)
        self.fusion = FusionMLP(config.roi_bins, config.mlp_hidden)

    def forward_batch(self, x: torch.Tensor):
        """x: (B, C, T) -> (det_logits, det_offsets, seg_probs), batched."""
        if x.ndim != 3 or x.shape[1] != self.config.channels or x.shape[2] != self.config.window:
            raise ShapeError(
                f"expected (B, {self.config.channels}, {self.config.window}), got {tuple(x.shape)}"
            )
        det_feats = self.encoder(x)
        seg_feats = det_feats if self.encoder_seg is None else self.encoder_seg(x)
        pyramid = self.fpn(det_feats[1:])
        logits, offsets = self.head(pyramid)
        seg_probs = self.seg_decoder(seg_feats, self.config.window)
        return logits, offsets, seg_probs

    def forward(self, x: torch.Tensor):
        return self.forward_batch(x)


def build_model(config: ModelConfig, seed: int = 0) -> TicNet:
    """Construct and deterministically initialize the network."""
    torch.manual_seed(seed)
    model = TicNet(config)
    _init_params(model, config.head_prior)
    _calibrate_norm_stats(model, config)
    return model


def _calibrate_norm_stats(model: TicNet, config: ModelConfig, batches: int = 4) -> None:
    """Seed batch-norm running statistics from the untrained activations.

    Freshly built norms carry (mean 0, var 1) buffers while the actual
    activation variance compounds through depth, so an eval-mode forward on
    an untrained net saturates the heads and breaks the near-silent-at-init
    contract. A few cumulative-average passes on unit-normal input put the
    buffers at the right scale; training overwrites them from real data.
    """
    bns = [m for m in model.modules() if isinstance(m, nn.BatchNorm1d)]
    if not bns:
        return
    for m in bns:
        m.momentum = None  # cumulative averaging during calibration
    was_training = model.training
    model.train()
    with torch.no_grad():
        for _ in range(batches):
            model.forward_batch(torch.randn(4, config.channels, config.window))
    model.train(was_training)
    for m in bns:
        m.momentum = 0.1


def _init_params(model: TicNet, prior: float) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.InstanceNorm1d)):
            if m.weight is not None:
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
    # final head layers start near zero so initial offsets decode to the
    # anchors themselves; the classification bias puts positive prob ~ prior
    nn.init.normal_(model.head.cls.weight, std=0.01)
    nn.init.normal_(model.head.reg.weight, std=0.01)
    nn.init.constant_(model.head.cls.bias, -math.log((1.0 - prior) / prior))
    nn.init.zeros_(model.head.reg.bias)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _as_input(features, dtype, device) -> torch.Tensor:
    if isinstance(features, np.ndarray):
        features = torch.from_numpy(np.ascontiguousarray(features))
    if features.ndim != 2:
        raise ShapeError(f"features must be (C, T), got {tuple(features.shape)}")
    return features.to(dtype=dtype, device=device)


def forward_window(model: TicNet, features) -> NetOutputs:
    """Inference-mode forward on a single C x T window."""
    p = next(model.parameters())
    x = _as_input(features, p.dtype, p.device)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits, offsets, seg = model.forward_batch(x.unsqueeze(0))
    finally:
        model.train(was_training)
    return NetOutputs(
        det_logits=[l[0] for l in logits],
        det_offsets=[o[0] for o in offsets],
        seg_probs=seg[0],
    )


def roi_pool_1d(seg: torch.Tensor, intervals: torch.Tensor, bins: int) -> torch.Tensor:
    """Average-pool a framewise sequence over each interval using equal-width
    bins with linear interpolation at fractional edges.

    seg: (T,); intervals: (N, 2) [start, end); returns (N, bins). The
    sequence is treated as piecewise constant per frame, so pooling a
    constant sequence returns that constant in every bin. Differentiable in
    both seg values and interval endpoints.
    """
    t = seg.shape[0]
    csum = torch.cat([seg.new_zeros(1), torch.cumsum(seg, 0)])
    grid = torch.linspace(0.0, 1.0, bins + 1, dtype=seg.dtype, device=seg.device)
    edges = intervals[:, 0:1] + (intervals[:, 1:2] - intervals[:, 0:1]) * grid
    edges = edges.clamp(0.0, float(t))
    idx = edges.floor().clamp(0.0, float(t - 1))
    frac = edges - idx
    idx = idx.long()
    s_at = csum[idx] + frac * seg[idx]
    integral = s_at[:, 1:] - s_at[:, :-1]
    width = (edges[:, 1:] - edges[:, :-1]).clamp_min(1e-6)
    return integral / width


def fuse_scores(model: TicNet, dets: list[Detection], seg_p1: torch.Tensor) -> list[Detection]:
    """Refine raw detection probabilities through the fusion MLP.

    seg_p1 is the finest-stage framewise probability sequence of the same
    window. Intervals are returned unchanged.
    """
    if not dets:
        return []
    t = seg_p1.shape[0]
    for d in dets:
        if d.interval.start < 0.0 or d.interval.end > t:
            raise ContractError(f"detection {d.interval} outside window [0, {t})")
    p = next(model.parameters())
    ivals = torch.tensor(
        [[d.interval.start, d.interval.end] for d in dets], dtype=p.dtype, device=p.device
    )
    raw = torch.tensor([d.raw_prob for d in dets], dtype=p.dtype, device=p.device)
    with torch.no_grad():
        v = roi_pool_1d(seg_p1.to(p.dtype), ivals, model.config.roi_bins)
        refined = model.fusion(torch.cat([v, raw.unsqueeze(1)], dim=1))
    return [
        dc_replace(d, refined_prob=float(r)) for d, r in zip(dets, refined.cpu().numpy())
    ]


def check_anchor_compat(config: ModelConfig, anchors: AnchorSet) -> None:
    if anchors.strides != LEVEL_STRIDES:
        raise ShapeError(f"anchor strides {anchors.strides} != model strides {LEVEL_STRIDES}")
    if anchors.anchors_per_pos != config.anchors_per_pos:
        raise ShapeError(
            f"{anchors.anchors_per_pos} anchors per position, model expects {config.anchors_per_pos}"
        )


def detect_window(
    model: TicNet, features, anchors: AnchorSet, prob_thresh: float
) -> list[Detection]:
    """Decode all anchors of one window, keep raw_prob >= prob_thresh, clamp
    intervals to the window, and refine scores. No NMS here."""
    check_anchor_compat(model.config, anchors)
    window = model.config.window
    outputs = forward_window(model, features)
    dets: list[Detection] = []
    for lv, (stride, lengths) in enumerate(anchors.levels):
        probs = torch.sigmoid(outputs.det_logits[lv]).cpu().numpy()  # (A, P)
        offs = outputs.det_offsets[lv].cpu().numpy()  # (A, 2, P)
        positions = window // stride
        centers = (np.arange(positions) + 0.5) * stride
        for a, length in enumerate(lengths):
            keep = np.nonzero(probs[a] >= prob_thresh)[0]
            for pos in keep:
                dm, dd = offs[a, 0, pos], offs[a, 1, pos]
                # an undertrained head can emit |dd| past exp()'s float range;
                # anything that large decodes outside the window and is dropped
                dd = float(np.clip(dd, -20.0, 20.0))
                anchor = Interval(centers[pos] - length / 2.0, centers[pos] + length / 2.0)
                decoded = decode_offsets(float(dm), dd, anchor, clamp_to=window)
                if decoded is None:
                    continue
                dets.append(
                    Detection(
                        interval=decoded,
                        raw_prob=float(probs[a, pos]),
                        level=lv,
                        anchor_index=a * positions + int(pos),
                    )
                )
    return fuse_scores(model, dets, outputs.seg_probs[0])
