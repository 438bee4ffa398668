"""Accuracy / per-class F1 reports in the layout of the accuracy and F1
tables (CSV and aligned plain text)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import CLASS_NAMES, Dataset
from .infer import TtaConfig, predict_tta_batch
from .models import forward_ensemble


@dataclass
class MetricsReport:
    model: str
    confusion: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES
    precision: np.ndarray = field(init=False)
    recall: np.ndarray = field(init=False)
    f1: np.ndarray = field(init=False)

    def __post_init__(self):
        cm = np.asarray(self.confusion, dtype=np.int64)
        self.confusion = cm
        tp = np.diag(cm).astype(np.float64)
        pred = cm.sum(axis=0)
        true = cm.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.precision = np.where(pred > 0, tp / pred, 0.0)
            self.recall = np.where(true > 0, tp / true, 0.0)
            denom = self.precision + self.recall
            self.f1 = np.where(denom > 0, 2 * self.precision * self.recall / denom, 0.0)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total)

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)


def confusion_matrix(true, pred, n_classes: int = 7) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def report_from_predictions(name: str, true, pred, class_names=CLASS_NAMES) -> MetricsReport:
    return MetricsReport(name, confusion_matrix(true, pred, len(class_names)), tuple(class_names))


def evaluate(model, split: Dataset, tta: TtaConfig | None = None, name: str | None = None) -> MetricsReport:
    """Score ``model`` on one split; ground truth is the argmax of each label
    distribution (lowest index on ties)."""
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    if tta is None:
        probs = forward_ensemble(model, split.images)
    else:
        probs = predict_tta_batch(model, split.images, tta)
    pred = np.argmax(probs, axis=1)
    return report_from_predictions(name or getattr(model, "name", "model"), split.class_indices(), pred,
                                   split.schema.class_names)


def format_percent(x: float) -> str:
    return f"{100 * x:.2f} %"


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def accuracy_rows(reports: list[MetricsReport]) -> list[list[str]]:
    return [["model", "accuracy"]] + [[r.model, repr(r.accuracy)] for r in reports]


def f1_rows(reports: list[MetricsReport]) -> list[list[str]]:
    names = reports[0].class_names
    rows = [["class"] + [r.model for r in reports]]
    for i, c in enumerate(names):
        rows.append([c] + [repr(float(r.f1[i])) for r in reports])
    return rows


def render_report(reports: list[MetricsReport], out_dir: str | Path) -> dict[str, Path]:
    """Write ``metrics.csv``, ``f1.csv``, ``confusion.csv`` and aligned text
    tables (``metrics.txt``, ``f1.txt``) into ``out_dir``, keeping input order."""
    if not reports:
        raise ValueError("need at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    def write_csv(name, rows):
        path = out / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        paths[name] = path

    write_csv("metrics.csv", accuracy_rows(reports))
    write_csv("f1.csv", f1_rows(reports))
    confusion = [["model", "true"] + list(reports[0].class_names)]
    for r in reports:
        for i, c in enumerate(r.class_names):
            confusion.append([r.model, c] + [str(v) for v in r.confusion[i]])
    write_csv("confusion.csv", confusion)

    acc_text = [["Model", "Accuracy"]] + [[r.model, format_percent(r.accuracy)] for r in reports]
    f1_text = [["Class"] + [r.model for r in reports]]
    for i, c in enumerate(reports[0].class_names):
        f1_text.append([c.capitalize()] + [f"{r.f1[i]:.2f}" for r in reports])
    for name, rows in (("metrics.txt", acc_text), ("f1.txt", f1_text)):
        (out / name).write_text(_aligned(rows), encoding="utf-8")
        paths[name] = out / name
    return paths
