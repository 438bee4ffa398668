"""Random affine augmentation with nearest-neighbour sampling and nearest
border fill."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentPolicy:
    """Augmentation ranges. Angles are in degrees, shifts are fractions of
    the image size, zoom is a scale factor range."""

    hflip: bool = True
    vflip: bool = True
    rotation_max: float = 15.0
    width_shift_max: float = 0.1
    height_shift_max: float = 0.1
    shear_max: float = 10.0
    zoom_low: float = 0.9
    zoom_high: float = 1.1
    fill: str = "nearest"

    def __post_init__(self):
        if self.rotation_max < 0:
            raise ValueError("rotation_max must be >= 0")
        if self.shear_max < 0:
            raise ValueError("shear_max must be >= 0")
        for name in ("width_shift_max", "height_shift_max"):
            if not 0 <= getattr(self, name) <= 0.5:
                raise ValueError(f"{name} must lie in [0, 0.5]")
        if not 0 < self.zoom_low <= self.zoom_high:
            raise ValueError("need 0 < zoom_low <= zoom_high")
        if self.fill != "nearest":
            raise ValueError("only nearest fill is supported")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(hflip=False, vflip=False, rotation_max=0.0, width_shift_max=0.0,
                   height_shift_max=0.0, shear_max=0.0, zoom_low=1.0, zoom_high=1.0)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix taking output pixel ``(x, y, 1)`` to input ``(x, y)``."""

    matrix: np.ndarray

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, AffineTransform.identity().matrix))


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Per-sample generator so augmentation does not depend on worker order."""
    return np.random.default_rng([seed, *keys])


def sample_params(policy: AugmentPolicy, rng: np.random.Generator) -> dict:
    """Draw one set of augmentation parameters (the draw order is fixed)."""
    hflip = bool(rng.random() < 0.5) if policy.hflip else False
    vflip = bool(rng.random() < 0.5) if policy.vflip else False
    return dict(
        hflip=hflip,
        vflip=vflip,
        rotation=float(rng.uniform(-policy.rotation_max, policy.rotation_max)),
        shear=float(rng.uniform(-policy.shear_max, policy.shear_max)),
        zoom=float(rng.uniform(policy.zoom_low, policy.zoom_high)),
        shift_x=float(rng.uniform(-policy.width_shift_max, policy.width_shift_max)),
        shift_y=float(rng.uniform(-policy.height_shift_max, policy.height_shift_max)),
    )


def build_transform(params: dict, height: int = 48, width: int = 48) -> AffineTransform:
    """Inverse-map matrix for flip -> rotate -> shear -> zoom -> shift about
    the image centre.

    The forward map is ``T . Z . S . R . F`` on centred coordinates; the
    returned matrix is its inverse, built factor by factor so that zero
    parameters give the identity exactly.
    """
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    inv = np.eye(3)
    # inverse composes in reverse order: F^-1 R^-1 S^-1 Z^-1 T^-1
    if params.get("hflip"):
        inv = inv @ np.array([[-1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    if params.get("vflip"):
        inv = inv @ np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, 1.0]])
    theta = math.radians(params.get("rotation", 0.0))
    if theta:
        c, s = math.cos(theta), math.sin(theta)
        inv = inv @ np.array([[c, s, 0], [-s, c, 0], [0, 0, 1.0]])
    shear = math.radians(params.get("shear", 0.0))
    if shear:
        inv = inv @ np.array([[1.0, -math.tan(shear), 0], [0, 1.0, 0], [0, 0, 1.0]])
    zoom = params.get("zoom", 1.0)
    if zoom != 1.0:
        inv = inv @ np.diag([1.0 / zoom, 1.0 / zoom, 1.0])
    tx, ty = params.get("shift_x", 0.0) * width, params.get("shift_y", 0.0) * height
    if tx or ty:
        inv = inv @ np.array([[1.0, 0, -tx], [0, 1.0, -ty], [0, 0, 1.0]])
    if not np.array_equal(inv, np.eye(3)):
        centre = np.array([[1.0, 0, cx], [0, 1.0, cy], [0, 0, 1.0]])
        uncentre = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
        inv = centre @ inv @ uncentre
    return AffineTransform(inv[:2].copy())


def sample_transform(policy: AugmentPolicy, rng: np.random.Generator,
                     height: int = 48, width: int = 48) -> AffineTransform:
    return build_transform(sample_params(policy, rng), height, width)


def apply_transform(img: np.ndarray, t: AffineTransform) -> np.ndarray:
    """Inverse-warp ``img`` (``H x W`` or ``H x W x C``) with nearest sampling.

    Source coordinates outside the image are clamped to the border, so the
    output only ever contains values present in the input.
    """
    m = np.asarray(t.matrix, dtype=np.float64)
    if m.shape != (2, 3) or not np.isfinite(m).all():
        raise ValueError("transform matrix must be a finite 2x3 array")
    if t.is_identity():
        return img.copy()
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    src_y = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    ix = np.clip(np.floor(src_x + 0.5), 0, w - 1).astype(np.intp)
    iy = np.clip(np.floor(src_y + 0.5), 0, h - 1).astype(np.intp)
    return img[iy, ix]


def augment_batch(images: np.ndarray, policy: AugmentPolicy, seed: int, epoch: int,
                  indices) -> np.ndarray:
    """Augment ``images[i]`` with a transform drawn from ``sample_rng(seed, epoch, indices[i])``."""
    h, w = images.shape[1:3]
    out = np.empty_like(images)
    for j, (img, idx) in enumerate(zip(images, indices)):
        t = sample_transform(policy, sample_rng(seed, epoch, int(idx)), h, w)
        out[j] = apply_transform(img, t)
    return out
