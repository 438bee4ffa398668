"""Nesterov SGD, learning-rate schedule, plateau/early-stop callbacks and
the three training procedures (backbone, ensemble head, distillation)."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .augment import AugmentPolicy, augment_batch
from .dataio import Dataset
from .losses import SmoothingConfig, smooth_distribution, soft_cross_entropy
from .models import (Classifier, StudentConfig, build_classifier, build_student, count_parameters,
                     forward_ensemble, logits_numpy, to_tensor)

log = logging.getLogger(__name__)

TARGET_MODES = ("smoothed", "plain", "soft")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 128
    alpha: float = 0.1
    seed: int = 0
    early_stop_patience: int = 15
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    monitor: str = "val_accuracy"
    weight_decay: float = 0.0
    augment: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.lr0 > 0, "lr0 must be > 0"),
            (0 <= self.momentum < 1, "momentum must lie in [0, 1)"),
            (self.decay >= 0, "decay must be >= 0"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (0 <= self.alpha < 1, "alpha must lie in [0, 1)"),
            (self.early_stop_patience >= 1, "early_stop_patience must be >= 1"),
            (self.plateau_patience >= 1, "plateau_patience must be >= 1"),
            (0 < self.plateau_factor < 1, "plateau_factor must lie in (0, 1)"),
            (self.monitor == "val_accuracy", "monitor must be 'val_accuracy'"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **changes})


def scheduled_lr(lr0: float, decay: float, t: int) -> float:
    """Time-based decay ``lr0 / (1 + decay * t)`` with ``t`` counted in batches."""
    if t < 0:
        raise ValueError("iteration must be >= 0")
    return lr0 / (1.0 + decay * t)


def nesterov_step(params, grads, velocities, lr: float, momentum: float):
    """One Nesterov update in velocity form.

    ``v <- mu * v - lr * g`` then ``theta <- theta + mu * v - lr * g``.
    Works on numpy arrays, torch tensors or floats; returns new
    ``(params, velocities)`` lists.
    """
    if not (len(params) == len(grads) == len(velocities)):
        raise ValueError("params, grads and velocities must align")
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocities):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(v):
            raise ValueError(f"shape mismatch: param {np.shape(p)}, grad {np.shape(g)}, velocity {np.shape(v)}")
        v = momentum * v - lr * g
        new_v.append(v)
        new_p.append(p + momentum * v - lr * g)
    return new_p, new_v


class NesterovSGD:
    """In-place torch optimizer around :func:`nesterov_step`."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [torch.zeros_like(p) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float):
        ps, gs, vs = [], [], []
        for p, v in zip(self.params, self.velocities):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p
            ps.append(p)
            gs.append(g)
            vs.append(v)
        new_p, new_v = nesterov_step([p.detach() for p in ps], gs, vs, lr, self.momentum)
        for p, v, np_, nv in zip(ps, vs, new_p, new_v):
            p.copy_(np_)
            v.copy_(nv)


class TrainingMonitor:
    """Reduce-on-plateau and early stopping on a maximised metric.

    Both counters reset on strict improvement; the plateau counter also
    resets after each reduction.
    """

    def __init__(self, early_stop_patience: int = 15, plateau_patience: int = 5, plateau_factor: float = 0.5):
        self.early_stop_patience = early_stop_patience
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.best = -math.inf
        self.best_epoch = 0
        self.wait = 0
        self.plateau_wait = 0
        self.lr_scale = 1.0
        self.stop = False
        self.best_state = None

    def update(self, epoch: int, value: float, snapshot: Callable[[], object] | None = None) -> list[str]:
        events = []
        if value > self.best:
            self.best, self.best_epoch = value, epoch
            self.wait = self.plateau_wait = 0
            if snapshot is not None:
                self.best_state = snapshot()
            events.append("improved")
        else:
            self.wait += 1
            self.plateau_wait += 1
            if self.plateau_wait >= self.plateau_patience:
                self.lr_scale *= self.plateau_factor
                self.plateau_wait = 0
                events.append("reduce_lr")
            if self.wait >= self.early_stop_patience:
                self.stop = True
                events.append("early_stop")
        return events


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_value: float = float("nan")
    stopped_early: bool = False


def accuracy(model: torch.nn.Module, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot score an empty split")
    pred = np.argmax(logits_numpy(model, dataset.images), axis=1)
    return float(np.mean(pred == dataset.class_indices()))


def _targets(train: Dataset, cfg: TrainConfig, mode: str, soft_targets) -> np.ndarray:
    if mode == "smoothed":
        return smooth_distribution(train.labels, SmoothingConfig(cfg.alpha, train.schema.n_classes))
    if mode == "plain":
        return train.labels
    if mode == "soft":
        if soft_targets is None:
            raise ValueError("soft mode needs soft_targets")
        soft = np.asarray(soft_targets, dtype=np.float64)
        if soft.shape != train.labels.shape:
            raise ValueError(f"soft targets {soft.shape} do not match the train split {train.labels.shape}")
        return soft
    raise ValueError(f"target_mode must be one of {TARGET_MODES}, got {mode!r}")


def run_training(
    model: torch.nn.Module,
    dataset: Dataset,
    cfg: TrainConfig,
    target_mode: str = "smoothed",
    soft_targets=None,
    policy: AugmentPolicy | None = None,
    evaluate_fn: Callable[[torch.nn.Module, int], float] | None = None,
) -> TrainResult:
    """Train ``model`` in place on the train split, monitoring val accuracy.

    ``soft_targets`` rows align with ``dataset.split("train")``.
    ``evaluate_fn(model, epoch)`` replaces the validation metric (used to
    script callback behaviour). Best-epoch weights are restored at the end.
    """
    train, val = dataset.split("train"), dataset.split("val")
    if len(train) == 0:
        raise ValueError("train split is empty")
    if evaluate_fn is None and len(val) == 0:
        raise ValueError("val split is empty")
    targets = _targets(train, cfg, target_mode, soft_targets)
    policy = policy if policy is not None else AugmentPolicy()
    torch.manual_seed(cfg.seed)

    opt = NesterovSGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    monitor = TrainingMonitor(cfg.early_stop_patience, cfg.plateau_patience, cfg.plateau_factor)
    result = TrainResult(model)
    n = len(train)
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, seen = 0.0, 0
        lr = scheduled_lr(cfg.lr0, cfg.decay, t) * monitor.lr_scale
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = train.images[idx]
            if cfg.augment:
                x = augment_batch(x, policy, cfg.seed, epoch, idx)
            logits = model(to_tensor(x))
            loss = soft_cross_entropy(logits, torch.from_numpy(targets[idx]).to(logits.dtype))
            lr = scheduled_lr(cfg.lr0, cfg.decay, t) * monitor.lr_scale
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}, lr {lr:.6g}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            t += 1
            total += loss.item() * len(idx)
            seen += len(idx)
        value = evaluate_fn(model, epoch) if evaluate_fn is not None else accuracy(model, val)
        events = monitor.update(epoch, value, lambda: copy.deepcopy(model.state_dict()))
        result.history.append({"epoch": epoch, "loss": total / seen, "val_accuracy": value, "lr": lr})
        log.info("epoch %d loss %.4f %s %.4f lr %.6g %s", epoch, total / seen, cfg.monitor, value, lr,
                 ",".join(events))
        if monitor.stop:
            result.stopped_early = True
            break
    if monitor.best_state is not None:
        model.load_state_dict(monitor.best_state)
    result.best_epoch, result.best_value = monitor.best_epoch, monitor.best
    return result


def write_history_csv(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "val_accuracy", "lr"], lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in writer.fieldnames})
    return path


def save_config(cfg: TrainConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def train_ensemble(
    members,
    dataset: Dataset,
    cfg: TrainConfig,
    head_hidden: int = 256,
    dropout_rate: float = 0.3,
    finetune: bool = False,
    policy: AugmentPolicy | None = None,
) -> tuple[Classifier, list[TrainResult]]:
    """Fuse trained backbones under a new MLP head.

    ``members`` are trained single-backbone classifiers (or bare backbones);
    their backbones are copied and frozen while the head trains. With
    ``finetune`` everything is then unfrozen and trained at ``lr0 / 10``.
    """
    backbones = []
    for m in members:
        if isinstance(m, Classifier):
            backbones.extend(copy.deepcopy(list(m.backbones)))
        else:
            backbones.append(copy.deepcopy(m))
    model = build_classifier(backbones, head_hidden, dropout_rate, seed=cfg.seed, name="EmoXNet")
    expected = sum(b.feature_dim for b in backbones)
    if model.head_input_dim != expected:
        raise ValueError(f"head input {model.head_input_dim} != sum of feature dims {expected}")
    model.freeze_backbones(True)
    results = [run_training(model, dataset, cfg, "smoothed", policy=policy)]
    if finetune:
        model.freeze_backbones(False)
        results.append(run_training(model, dataset, cfg.replace(lr0=cfg.lr0 / 10), "smoothed", policy=policy))
    model.eval()
    return model, results


def distillation_targets(teacher: torch.nn.Module, images, alpha: float) -> np.ndarray:
    """Label-smoothed teacher probabilities used as the student's targets."""
    probs = forward_ensemble(teacher, images)
    return smooth_distribution(probs, SmoothingConfig(alpha, probs.shape[1]))


def distill(
    teacher: Classifier,
    dataset: Dataset,
    cfg: TrainConfig,
    student_cfg: StudentConfig = StudentConfig(),
    hard_weight: float = 0.0,
    policy: AugmentPolicy | None = None,
) -> tuple[Classifier, TrainResult]:
    """Train a student on smoothed teacher outputs over the train split.

    ``hard_weight`` blends in the ground-truth labels:
    ``targets = (1 - w) * soft + w * labels``.
    """
    n = dataset.schema.n_classes
    if teacher.n_classes != n:
        raise ValueError(f"teacher predicts {teacher.n_classes} classes, dataset has {n}")
    if not 0.0 <= hard_weight <= 1.0:
        raise ValueError("hard_weight must lie in [0, 1]")
    train = dataset.split("train")
    targets = distillation_targets(teacher, train.images, cfg.alpha)
    if hard_weight:
        targets = (1.0 - hard_weight) * targets + hard_weight * train.labels
    student = build_student(student_cfg, cfg.seed, teacher_params=count_parameters(teacher))
    if student.n_classes != teacher.n_classes:
        raise ValueError("teacher and student schemas differ")
    result = run_training(student, dataset, cfg, "soft", soft_targets=targets, policy=policy)
    student.eval()
    return student, result
