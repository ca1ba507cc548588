"""GradCAM saliency for one encoder branch, region statistics and overlays."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .model import FusionNet, parameters_finite

PLANES = {"sagittal": 0, "coronal": 1, "axial": 2}
MEAN_OF_BRANCHES = "mean"
OVERLAY_ALPHA = 0.5


class SaliencyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SaliencyVolume:
    values: np.ndarray
    target_class: int
    target_branch: str
    source_layer: str
    alignment: tuple[int, ...]
    degenerate: bool = False


def _resample(raw: torch.Tensor, size) -> torch.Tensor:
    """Trilinear (bilinear for 2D) resampling of a (B, 1, ...) map."""
    mode = "trilinear" if raw.dim() == 5 else "bilinear"
    return F.interpolate(raw, size=tuple(size), mode=mode, align_corners=False)


def minmax_normalize(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale to [0, 1]; an all-nonpositive map becomes all zeros and is flagged."""
    hi = float(arr.max())
    if hi <= 0:
        return np.zeros_like(arr), True
    lo = float(arr.min())
    if hi == lo:
        return np.ones_like(arr), False
    return (arr - lo) / (hi - lo), False


def cam_from_activations(activations: torch.Tensor, gradients: torch.Tensor) -> torch.Tensor:
    """ReLU of the activation maps weighted by their spatially averaged gradients.

    Inputs are (B, K, ...) tensors; returns (B, 1, ...).
    """
    spatial = tuple(range(2, activations.dim()))
    alpha = gradients.mean(dim=spatial, keepdim=True)
    return F.relu((alpha * activations).sum(dim=1, keepdim=True))


def gradcam(model: FusionNet, stack, target_class: int, target_branch: str = "T1") -> SaliencyVolume:
    """Class-discriminative map from the last conv block of one encoder branch.

    ``stack`` is a (channels, X, Y, Z) array or a batch of one. Passing
    ``target_branch="mean"`` averages the raw maps of every branch before
    normalisation.
    """
    cfg = model.config
    branches = list(cfg.modalities) if target_branch == MEAN_OF_BRANCHES else [target_branch]
    for b in branches:
        if b not in cfg.modalities:
            raise SaliencyError(f"unknown branch {b!r}; choose from {list(cfg.modalities)} or 'mean'")
    if not 0 <= target_class < cfg.n_classes:
        raise SaliencyError(f"target_class {target_class} outside [0, {cfg.n_classes})")
    if not parameters_finite(model):
        raise SaliencyError("model parameters contain non-finite values")

    x = torch.as_tensor(np.asarray(stack), dtype=next(model.parameters()).dtype)
    if x.dim() == cfg.spatial_rank + 1:
        x = x.unsqueeze(0)
    if x.shape[0] != 1:
        raise SaliencyError("gradcam explains one input at a time")

    model.eval()
    model.zero_grad(set_to_none=True)
    with torch.enable_grad():
        trace = model.trace(x.requires_grad_(False), retain_activations=True)
        acts = [trace.activations[b] for b in branches]
        grads = torch.autograd.grad(trace.logits[0, target_class], acts, allow_unused=True)
    raws = []
    for a, g in zip(acts, grads):
        g = torch.zeros_like(a) if g is None else g
        raws.append(cam_from_activations(a.detach(), g.detach()))
    raw = torch.stack(raws).mean(dim=0)
    up = _resample(raw, x.shape[2:])[0, 0].double().numpy()
    values, degenerate = minmax_normalize(up)
    layer = f"encoders.{branches[0]}.blocks.{len(cfg.encoder_channels) - 1}" if len(branches) == 1 else "mean"
    return SaliencyVolume(values, target_class, target_branch, layer, tuple(x.shape[2:]), degenerate)


def region_saliency_stats(saliency: SaliencyVolume | np.ndarray, masks) -> dict:
    """Mean saliency inside each mask and outside the brain, with voxel counts.

    ``masks`` is a GroundTruthMasks or a mapping with at least a ``brain`` entry.
    """
    values = np.asarray(getattr(saliency, "values", saliency), dtype=np.float64)
    mask_map = masks.as_dict() if hasattr(masks, "as_dict") else dict(masks)
    regions = {name: np.asarray(m, bool) for name, m in mask_map.items()}
    if "brain" not in regions:
        raise SaliencyError("masks must include 'brain'")
    regions["outside_brain"] = ~regions["brain"]
    out = {}
    for name, m in regions.items():
        if m.shape != values.shape:
            raise SaliencyError(f"mask {name!r} shape {m.shape} does not match saliency {values.shape}")
        n = int(m.sum())
        out[name] = {"mean": float(values[m].mean()) if n else None, "count": n}
    return out


def _slice(volume: np.ndarray, plane: str, index: int) -> np.ndarray:
    if plane not in PLANES:
        raise SaliencyError(f"plane must be one of {sorted(PLANES)}, got {plane!r}")
    axis = PLANES[plane]
    if not 0 <= index < volume.shape[axis]:
        raise SaliencyError(f"{plane} index {index} outside [0, {volume.shape[axis]})")
    return np.take(volume, index, axis=axis)


def heat_colormap(v: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp: R, G, B rise over thirds of [0, 1]."""
    v = np.clip(v, 0, 1)[..., None]
    return np.clip(np.concatenate([3 * v, 3 * v - 1, 3 * v - 2], axis=-1), 0, 1)


def overlay_rgb(volume, saliency, plane: str, index: int) -> np.ndarray:
    """uint8 RGB array (rows, cols, 3) of the slice with saliency blended in.

    The slice is min-max scaled to gray; saliency s is blended with alpha
    ``0.5 * s`` using :func:`heat_colormap`. Rows follow the second remaining
    axis, columns the first (axial: rows y, columns x).
    """
    vol = np.asarray(getattr(volume, "data", volume), dtype=np.float64)
    sal = np.asarray(getattr(saliency, "values", saliency), dtype=np.float64)
    if vol.shape != sal.shape:
        raise SaliencyError(f"volume {vol.shape} and saliency {sal.shape} are not aligned")
    img = _slice(vol, plane, index)
    s = _slice(sal, plane, index)
    lo, hi = img.min(), img.max()
    gray = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    gray = np.repeat(gray[..., None], 3, axis=-1)
    alpha = OVERLAY_ALPHA * np.clip(s, 0, 1)[..., None]
    rgb = (1 - alpha) * gray + alpha * heat_colormap(s)
    return np.round(rgb.transpose(1, 0, 2) * 255).astype(np.uint8)


def export_overlay(volume, saliency, plane: str, index: int, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay_rgb(volume, saliency, plane, index)).save(path, format="PNG")
    return path
