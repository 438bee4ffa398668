"""Single-pass and test-time-augmented prediction, latency benchmarking."""
from __future__ import annotations

import csv
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AffineTransform, AugmentPolicy, apply_transform, sample_transform
from .models import count_parameters, forward_ensemble, to_tensor

CANONICAL_SHAPE = (48, 48, 3)


def default_tta_policy() -> AugmentPolicy:
    return AugmentPolicy(vflip=False)


@dataclass(frozen=True)
class TtaConfig:
    steps: int = 10
    policy: AugmentPolicy = field(default_factory=default_tta_policy)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("TTA needs at least one step")


def _check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.shape != CANONICAL_SHAPE:
        raise ValueError(f"expected a {CANONICAL_SHAPE} image, got {img.shape}")
    return img


def predict(model, img) -> np.ndarray:
    """Probabilities for one canonical image (dropout disabled)."""
    return forward_ensemble(model, _check_image(img)[None])[0]


def tta_transforms(cfg: TtaConfig, height: int = 48, width: int = 48) -> list[AffineTransform]:
    """Identity first, then ``steps - 1`` transforms drawn from ``cfg.policy``."""
    rng = np.random.default_rng(cfg.seed)
    return [AffineTransform.identity()] + [
        sample_transform(cfg.policy, rng, height, width) for _ in range(cfg.steps - 1)
    ]


def average_predictions(outputs) -> np.ndarray:
    """Arithmetic mean over the first axis, computed relative to the first
    entry so that identical per-step outputs average to themselves exactly."""
    outputs = np.asarray(outputs, dtype=np.float64)
    base = outputs[0]
    return base + (outputs[1:] - base).sum(axis=0) / len(outputs)


def predict_tta_batch(model, images, cfg: TtaConfig = TtaConfig()) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    transforms = tta_transforms(cfg, *images.shape[1:3])
    first = forward_ensemble(model, images)
    outputs = [first]
    for t in transforms[1:]:
        if t.is_identity():
            outputs.append(first)
            continue
        views = np.stack([apply_transform(img, t) for img in images])
        outputs.append(forward_ensemble(model, views))
    return average_predictions(outputs)


def predict_tta(model, img, cfg: TtaConfig = TtaConfig()) -> np.ndarray:
    """Average of softmax outputs over the identity view and ``steps - 1``
    augmented views."""
    return predict_tta_batch(model, _check_image(img)[None], cfg)[0]


@dataclass
class LatencyReport:
    model: str
    params: int
    n_runs: int
    median_ms: float
    p95_ms: float
    host: str
    environment: dict = field(default_factory=dict)


def benchmark_latency(model, n_warmup: int = 10, n_runs: int = 100, name: str | None = None,
                      image=None) -> LatencyReport:
    """Median and 95th-percentile wall time of single-image forward passes."""
    if n_runs < 10:
        raise ValueError("n_runs must be >= 10")
    x = to_tensor(np.zeros((1, *CANONICAL_SHAPE), np.float32) if image is None else _check_image(image)[None])
    model.eval()
    times = []
    with torch.no_grad():
        for i in range(n_warmup + n_runs):
            start = time.perf_counter()
            model(x)
            elapsed = time.perf_counter() - start
            if i >= n_warmup:
                times.append(elapsed * 1e3)
    times = np.array(times)
    return LatencyReport(
        model=name or getattr(model, "name", type(model).__name__),
        params=count_parameters(model),
        n_runs=len(times),
        median_ms=float(np.median(times)),
        p95_ms=float(np.percentile(times, 95)),
        host=platform.node(),
        environment={
            "python": platform.python_version(),
            "torch": torch.__version__,
            "threads": torch.get_num_threads(),
            "machine": platform.machine(),
            "n_warmup": n_warmup,
        },
    )


def write_benchmark_csv(reports: list[LatencyReport], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "params", "median_ms", "p95_ms", "host"])
        for r in reports:
            writer.writerow([r.model, r.params, f"{r.median_ms:.4f}", f"{r.p95_ms:.4f}", r.host])
    return path
