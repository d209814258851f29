"""Training objectives: BCE classification with hard-negative mining,
SmoothL1 + EIoU interval regression, focal + Dice segmentation with deep
supervision, and the weighted total with L2 regularization.

All functions are torch-differentiable and dtype-agnostic (float32 training,
float64 for gradient verification and oracle tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError
from .geometry import IGNORED, NEGATIVE, POSITIVE, Interval, MatchResult

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    gamma: float = 2.0  # regression weight
    lam: float = 1.5  # EIoU weight inside regression
    alpha: float = 3.0  # segmentation branch weight
    beta: float = 0.001  # L2 weight
    hnm_ratio: float = 3.0  # mined negatives per positive
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_eps: float = 1e-6
    supervise_raw: bool = True  # also BCE the pre-fusion probability

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 beyond."""
    if not torch.is_tensor(x):
        ax = abs(x)
        return 0.5 * x * x if ax < 1.0 else ax - 0.5
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def bce_prob(p, y):
    """Binary cross-entropy on probabilities, clamped away from {0, 1}."""
    p = torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))


def focal_loss(p, y, a: float = 0.25, g: float = 2.0):
    """Focal loss on probabilities; reduces to a*BCE at g=0 (a split
    symmetrically across the two label values)."""
    p = torch.clamp(torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p,
                    PROB_EPS, 1.0 - PROB_EPS)
    y = torch.as_tensor(y, dtype=p.dtype, device=p.device)
    pos = -a * (1.0 - p) ** g * torch.log(p)
    neg = -(1.0 - a) * p**g * torch.log1p(-p)
    return torch.where(y > 0.5, pos, neg)


def eiou_t(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Vectorized, differentiable EIoU on (N, 2) [start, end) tensors."""
    ps, pe = pred[..., 0], pred[..., 1]
    gs, ge = gt[..., 0], gt[..., 1]
    inter = torch.clamp(torch.minimum(pe, ge) - torch.maximum(ps, gs), min=0.0)
    union = (pe - ps) + (ge - gs) - inter
    d_c = torch.maximum(pe, ge) - torch.minimum(ps, gs)
    m_p, m_g = 0.5 * (ps + pe), 0.5 * (gs + ge)
    d_p, d_g = pe - ps, ge - gs
    return inter / union - (m_p - m_g) ** 2 / d_c**2 - (d_p - d_g) ** 2 / d_c**2


def eiou_loss(pred, gt):
    """1 - EIoU; accepts Intervals or (.., 2) tensors."""
    if isinstance(pred, Interval):
        pred = torch.tensor([pred.start, pred.end], dtype=torch.float64)
    if isinstance(gt, Interval):
        gt = torch.tensor([gt.start, gt.end], dtype=pred.dtype)
    return 1.0 - eiou_t(pred, gt)


def dice_loss(p: torch.Tensor, s, eps: float = 1e-6) -> torch.Tensor:
    """1 - Dice overlap between a probability sequence and binary labels."""
    if not torch.is_tensor(p):
        p = torch.as_tensor(p, dtype=torch.float64)
    s = torch.as_tensor(s, dtype=p.dtype, device=p.device)
    if p.shape != s.shape:
        raise ShapeError(f"dice length mismatch: {tuple(p.shape)} vs {tuple(s.shape)}")
    num = 2.0 * (p * s).sum() + eps
    den = p.sum() + s.sum() + eps
    return 1.0 - num / den


def segmentation_loss(seg_probs: torch.Tensor, labels, cfg: LossConfig,
                      valid_len: int | None = None) -> torch.Tensor:
    """Deep-supervised framewise loss over all K stages.

    Per stage: summed focal loss plus T-weighted Dice, all divided by T.
    Frames at and beyond ``valid_len`` (zero padding) are excluded.
    """
    if not torch.is_tensor(seg_probs):
        seg_probs = torch.as_tensor(seg_probs, dtype=torch.float64)
    s = torch.as_tensor(labels, dtype=seg_probs.dtype, device=seg_probs.device)
    k, t = seg_probs.shape
    if s.shape != (t,):
        raise ShapeError(f"labels shape {tuple(s.shape)} does not match T={t}")
    n = t if valid_len is None else min(valid_len, t)
    p = seg_probs[:, :n]
    s = s[:n]
    total = seg_probs.new_zeros(())
    for ki in range(k):
        fl = focal_loss(p[ki], s, cfg.focal_alpha, cfg.focal_gamma).sum()
        dl = dice_loss(p[ki], s, cfg.dice_eps)
        total = total + fl + n * dl
    return total / n


def encode_offsets_t(gts: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Tensor twin of geometry.encode_offsets on (N, 2) [start, end)."""
    m_a = 0.5 * (anchors[:, 0] + anchors[:, 1])
    d_a = anchors[:, 1] - anchors[:, 0]
    m_g = 0.5 * (gts[:, 0] + gts[:, 1])
    d_g = gts[:, 1] - gts[:, 0]
    return torch.stack([(m_g - m_a) / d_a, torch.log(d_g / d_a)], dim=1)


LOG_LEN_CLAMP = 8.0  # |log length ratio| bound in the training decode


def decode_offsets_t(offsets: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Tensor twin of geometry.decode_offsets (no window clamping).

    The log-length offset is bounded at +-LOG_LEN_CLAMP (a ~3000x length
    ratio) so a drifting regression head cannot push exp() and the squared
    EIoU penalties past float32 range mid-training.
    """
    m_a = 0.5 * (anchors[:, 0] + anchors[:, 1])
    d_a = anchors[:, 1] - anchors[:, 0]
    m = m_a + offsets[:, 0] * d_a
    d = d_a * torch.exp(offsets[:, 1].clamp(-LOG_LEN_CLAMP, LOG_LEN_CLAMP))
    return torch.stack([m - 0.5 * d, m + 0.5 * d], dim=1)


def detection_loss(
    cls_logits: torch.Tensor,
    offsets: torch.Tensor,
    anchors: torch.Tensor,
    match: MatchResult,
    gts: list[Interval],
    cfg: LossConfig,
    refined_probs: torch.Tensor | None = None,
    anchor_valid: np.ndarray | None = None,
    mined_negatives: np.ndarray | None = None,
    mining_sink: list | None = None,
) -> torch.Tensor:
    """Detection branch loss for one window, over flattened anchors.

    cls_logits: (N,); offsets: (N, 2); anchors: (N, 2) [start, end);
    refined_probs: (N,) post-fusion probabilities (optional);
    anchor_valid: bool mask excluding anchors centered in padding.

    Classification BCE covers positives plus the ceil(hnm_ratio * N_p)
    highest-loss negatives; SmoothL1 (offset space) and EIoU loss (interval
    space) cover positives only; everything is divided by N_p. On an
    all-background window the top ceil(hnm_ratio) negatives are used with
    divisor 1 and no regression term.

    ``mined_negatives`` bypasses online mining with a fixed index set (the
    gradient checker freezes the selection so the loss stays smooth across
    finite-difference probes); ``mining_sink`` records the selection made.
    """
    status = match.status.copy()
    if anchor_valid is not None:
        status = np.where(anchor_valid, status, IGNORED)
    pos_idx = np.nonzero(status == POSITIVE)[0]
    neg_idx = np.nonzero(status == NEGATIVE)[0]
    zero = cls_logits.new_zeros(())
    if pos_idx.size == 0 and neg_idx.size == 0:
        if mining_sink is not None:
            mining_sink.append(np.zeros(0, dtype=np.int64))
        return zero

    raw_probs = torch.sigmoid(cls_logits)

    def cls_loss_at(idx: np.ndarray, target: float) -> torch.Tensor:
        y = cls_logits.new_full((len(idx),), target)
        ix = torch.as_tensor(idx, dtype=torch.long, device=cls_logits.device)
        loss = bce_prob(raw_probs[ix], y)
        if refined_probs is not None:
            refined = bce_prob(refined_probs[ix], y)
            loss = 0.5 * (loss + refined) if cfg.supervise_raw else refined
        return loss

    n_pos = int(pos_idx.size)
    n_mined = math.ceil(cfg.hnm_ratio * n_pos) if n_pos else math.ceil(cfg.hnm_ratio)
    if mined_negatives is not None:
        mined = np.asarray(mined_negatives, dtype=np.int64)
        neg_losses = cls_loss_at(mined, 0.0) if mined.size else zero.new_zeros((0,))
    else:
        neg_losses = cls_loss_at(neg_idx, 0.0) if neg_idx.size else zero.new_zeros((0,))
        mined = neg_idx
        if neg_idx.size > n_mined:
            # stable descending order: highest loss first, index breaks ties
            order = np.lexsort((np.arange(neg_idx.size), -neg_losses.detach().cpu().numpy()))
            keep = order[:n_mined].copy()
            mined = neg_idx[keep]
            neg_losses = neg_losses[torch.as_tensor(keep, dtype=torch.long)]
    if mining_sink is not None:
        mining_sink.append(np.asarray(mined, dtype=np.int64))

    cls_sum = neg_losses.sum()
    reg_sum = zero
    if n_pos:
        cls_sum = cls_sum + cls_loss_at(pos_idx, 1.0).sum()
        pix = torch.as_tensor(pos_idx, dtype=torch.long, device=cls_logits.device)
        a = anchors[pix]
        g = torch.tensor(
            [[gts[j].start, gts[j].end] for j in match.gt_index[pos_idx]],
            dtype=anchors.dtype,
            device=anchors.device,
        )
        targets = encode_offsets_t(g, a)
        sl = smooth_l1(offsets[pix] - targets).sum()
        el = (1.0 - eiou_t(decode_offsets_t(offsets[pix], a), g)).sum()
        reg_sum = sl + cfg.lam * el
    divisor = n_pos if n_pos else 1
    return (cls_sum + cfg.gamma * reg_sum) / divisor


def l2_penalty(model: torch.nn.Module) -> torch.Tensor:
    """Sum of squared weight-tensor entries; biases and normalization
    scale/shift (all 1-D parameters) are excluded."""
    total = None
    for p in model.parameters():
        if p.ndim >= 2:
            term = (p * p).sum()
            total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def total_loss(loss_det, loss_seg, model: torch.nn.Module | None, cfg: LossConfig):
    """Weighted sum of branch losses plus L2 regularization."""
    reg = 0.0
    if model is not None and cfg.beta:
        reg = cfg.beta * l2_penalty(model)
    return loss_det + cfg.alpha * loss_seg + reg


def flatten_level_outputs(det_logits, det_offsets):
    """Flatten per-level (A, P) logits and (A, 2, P) offsets into (N,) and
    (N, 2), matching AnchorSet.all_anchors order (level, anchor row,
    position)."""
    flat_logits = torch.cat([l.reshape(-1) for l in det_logits])
    flat_offs = torch.cat([o.permute(0, 2, 1).reshape(-1, 2) for o in det_offsets])
    return flat_logits, flat_offs
