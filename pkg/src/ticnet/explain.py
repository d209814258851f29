"""1D Grad-CAM: map a detection's classification decision back to the time
frames that drove it.

The attribution target is the raw classification logit (pre-sigmoid) of the
anchor that produced the detection; the fusion MLP is outside the
attribution path. Channel weights are temporal averages of the gradient on
the target feature map.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .geometry import Detection
from .model import TicNet, _as_input


@dataclass
class CamResult:
    detection: Detection
    cam: np.ndarray  # (T,), values in [0, 1]
    target_layer: str


def _layer_registry(model: TicNet) -> dict[str, torch.nn.Module]:
    reg = {"en0": model.encoder.stem}
    for i, stage in enumerate(model.encoder.stages, start=1):
        reg[f"en{i}"] = stage
    for i, smooth in enumerate(model.fpn.smooths, start=1):
        reg[f"det{i}"] = smooth
    return reg


def cam_from_activation(activation: torch.Tensor, gradient: torch.Tensor, length: int) -> np.ndarray:
    """Gradient-weighted channel sum, rectified, linearly upsampled to
    ``length`` and normalized by its max (an all-zero map stays zero)."""
    weights = gradient.mean(dim=-1)  # (C,)
    cam = F.relu((weights[:, None] * activation).sum(dim=0))  # (P,)
    cam = F.interpolate(cam[None, None, :], size=length, mode="linear", align_corners=False)
    cam = cam[0, 0]
    peak = float(cam.max())
    if peak > 0.0:
        cam = cam / peak
    return cam.detach().cpu().numpy()


def grad_cam(
    model: TicNet, features, detection: Detection, target_layer: str | None = None
) -> CamResult:
    """Attribute one detection's raw classification logit to time frames of
    a target layer (defaults to the FPN level that produced it)."""
    if target_layer is None:
        if detection.level < 0:
            raise ConfigError("detection carries no level; pass target_layer explicitly")
        target_layer = f"det{detection.level + 1}"
    registry = _layer_registry(model)
    if target_layer not in registry:
        raise ConfigError(f"unknown layer {target_layer!r}; known: {sorted(registry)}")
    module = registry[target_layer]

    captured: dict[str, torch.Tensor] = {}

    def fwd_hook(_mod, _inp, out):
        captured["act"] = out
        out.register_hook(lambda g: captured.__setitem__("grad", g))

    handle = module.register_forward_hook(fwd_hook)
    was_training = model.training
    model.eval()
    try:
        p = next(model.parameters())
        x = _as_input(features, p.dtype, p.device).unsqueeze(0)
        with torch.enable_grad():
            logits, _offsets, _seg = model.forward_batch(x)
            flat = logits[detection.level][0].reshape(-1)
            if not 0 <= detection.anchor_index < flat.numel():
                raise ConfigError(
                    f"anchor_index {detection.anchor_index} out of range for level "
                    f"{detection.level}"
                )
            model.zero_grad(set_to_none=True)
            flat[detection.anchor_index].backward()
    finally:
        handle.remove()
        model.train(was_training)
        model.zero_grad(set_to_none=True)

    act = captured["act"][0].detach()
    grad = captured.get("grad")
    grad = torch.zeros_like(act) if grad is None else grad[0].detach()
    cam = cam_from_activation(act, grad, model.config.window)
    return CamResult(detection=detection, cam=cam, target_layer=target_layer)


def cam_to_csv(result: CamResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "value"])
        for j, v in enumerate(result.cam):
            w.writerow([j, f"{v:.6f}"])


def cam_to_json(result: CamResult) -> dict:
    d = result.detection
    return {
        "video_id": d.video_id,
        "start": d.interval.start,
        "end": d.interval.end,
        "raw_prob": d.raw_prob,
        "refined_prob": d.refined_prob,
        "level": d.level,
        "target_layer": result.target_layer,
        "cam": [float(v) for v in result.cam],
    }


def heatmap_matrix_csv(result: CamResult, features: np.ndarray, path) -> None:
    """Frames x {cam, per-channel input} matrix for heatmap plotting."""
    feats = np.asarray(features)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "cam"] + [f"ch{c}" for c in range(feats.shape[0])])
        for j in range(feats.shape[1]):
            w.writerow([j, f"{result.cam[j]:.6f}"] + [f"{v:.6f}" for v in feats[:, j]])


def save_cam_json(result: CamResult, path) -> None:
    with open(path, "w") as f:
        json.dump(cam_to_json(result), f, indent=2)
        f.write("\n")
