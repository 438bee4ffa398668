"""Gradient-weighted class activation maps and heatmap overlays."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .imaging import resize_bilinear, write_png
from .models import to_tensor

# Piecewise-linear colormap stops: (position, (r, g, b)), dark blue -> red.
COLORMAP_STOPS = (
    (0.0, (0.0, 0.0, 0.5)),
    (0.125, (0.0, 0.0, 1.0)),
    (0.375, (0.0, 1.0, 1.0)),
    (0.625, (1.0, 1.0, 0.0)),
    (0.875, (1.0, 0.0, 0.0)),
    (1.0, (0.5, 0.0, 0.0)),
)
OVERLAY_ALPHA = 0.5


def cam_from_raw(raw, height: int = 48, width: int = 48) -> np.ndarray:
    """ReLU, bilinear upsample and max-normalise a coarse activation map.

    An identically zero map stays zero.
    """
    raw = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    up = resize_bilinear(raw, height, width) if raw.shape != (height, width) else raw
    peak = up.max()
    if peak <= 0:
        return np.zeros((height, width))
    return np.clip(up / peak, 0.0, 1.0)


def grad_cam(model, img, class_index: int) -> np.ndarray:
    """Heatmap in [0, 1] with the image's spatial shape.

    Channel weights are the spatial mean of the class logit's gradient with
    respect to each backbone's final feature map; for several backbones the
    normalised maps are averaged.
    """
    n_classes = getattr(model, "n_classes", 7)
    if not 0 <= int(class_index) < n_classes:
        raise ValueError(f"class index {class_index} outside [0, {n_classes - 1}]")
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            maps = [m.detach() for m in model.feature_maps(to_tensor(img[None]))]
        maps = [m.double().requires_grad_(True) for m in maps]
        with torch.enable_grad():
            logits = model.head_from_maps([m.float() for m in maps])
            logits[0, int(class_index)].backward()
    finally:
        model.train(was_training)
    heat = np.zeros((h, w))
    for m in maps:
        fmap = m.detach()[0].numpy()
        weights = m.grad[0].numpy().mean(axis=(1, 2))
        raw = np.tensordot(weights, fmap, axes=1)
        heat += cam_from_raw(raw, h, w)
    return heat / len(maps)


def apply_colormap(heatmap) -> np.ndarray:
    h = np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0)
    pos = [p for p, _ in COLORMAP_STOPS]
    return np.stack([np.interp(h, pos, [c[i] for _, c in COLORMAP_STOPS]) for i in range(3)], axis=-1)


def overlay(img, heatmap) -> np.ndarray:
    """Blend the colormapped heatmap over the grayscale image with per-pixel
    weight ``0.5 * heat``; a zero heatmap leaves the grayscale image as is."""
    img = np.asarray(img, dtype=np.float64)
    heatmap = np.asarray(heatmap, dtype=np.float64)
    gray = img.mean(axis=-1) if img.ndim == 3 else img
    if gray.shape != heatmap.shape:
        raise ValueError(f"image {gray.shape} and heatmap {heatmap.shape} shapes differ")
    a = (OVERLAY_ALPHA * heatmap)[..., None]
    return (1.0 - a) * gray[..., None] + a * apply_colormap(heatmap)


def render_overlay(img, heatmap, out_path: str | Path) -> Path:
    """Write the overlay as an 8-bit RGB PNG."""
    return write_png(overlay(img, heatmap), out_path)
