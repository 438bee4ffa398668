"""Small image helpers shared by the loaders, CAM rendering and the CLI."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (edge samples clamp).

    Works on ``(H, W)`` or ``(H, W, C)`` arrays and keeps the input dtype for
    floating inputs.
    """
    img = np.asarray(img)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    src_h, src_w = img.shape[:2]
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64

    def axis_weights(n_src: int, n_dst: int):
        pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        pos = np.clip(pos, 0, n_src - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = pos - lo
        return lo, hi, frac

    y0, y1, fy = axis_weights(src_h, height)
    x0, x1, fx = axis_weights(src_w, width)
    data = img.astype(np.float64)
    fx = fx[None, :, None]
    top = data[y0][:, x0] * (1 - fx) + data[y0][:, x1] * fx
    bottom = data[y1][:, x0] * (1 - fx) + data[y1][:, x1] * fx
    fy = fy[:, None, None]
    out = top * (1 - fy) + bottom * fy
    out = out.astype(dtype)
    return out[:, :, 0] if squeeze else out


def read_image(path: str | Path, size: int = 48) -> np.ndarray:
    """Decode an image file into a ``size x size x 3`` float32 array in [0, 1]."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255)
    if rgb.shape[:2] != (size, size):
        rgb = resize_bilinear(rgb, size, size)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def write_png(img: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    try:
        Image.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc
    return path


def image_grid(images: list[np.ndarray], ncols: int, pad: int = 2) -> np.ndarray:
    """Tile equally shaped ``H x W x C`` images into one array (white padding)."""
    h, w, c = images[0].shape
    nrows = -(-len(images) // ncols)
    grid = np.ones((nrows * (h + pad) + pad, ncols * (w + pad) + pad, c), dtype=np.float32)
    for i, im in enumerate(images):
        r, q = divmod(i, ncols)
        y = pad + r * (h + pad)
        x = pad + q * (w + pad)
        grid[y:y + h, x:x + w] = im
    return grid
