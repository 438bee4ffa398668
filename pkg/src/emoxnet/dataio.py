"""Dataset containers and loaders for FER2013, FER+ votes, RAF-DB and the
procedural bars corpus used for desk-scale runs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .imaging import read_image

IMAGE_SIZE = 48
SPLITS = ("train", "val", "test")

# FER2013 emotion index order; the schema follows it directly.
CLASS_NAMES = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")

FER_USAGE = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}
FER_USAGE_INV = {v: k for k, v in FER_USAGE.items()}

FERPLUS_COLUMNS = (
    "neutral", "happiness", "surprise", "sadness", "anger",
    "disgust", "fear", "contempt", "unknown", "NF",
)
# FER+ vote column -> schema index; columns 7..9 have no target class.
FERPLUS_TO_SCHEMA = (6, 3, 5, 4, 0, 1, 2)

# RAF-DB basic-emotion list files use 1..7 = surprise, fear, disgust,
# happiness, sadness, anger, neutral.
DEFAULT_RAF_MAPPING = {
    1: "surprise", 2: "fear", 3: "disgust", 4: "happy",
    5: "sad", 6: "angry", 7: "neutral",
}

_INV255 = np.float32(255)


class DataFormatError(ValueError):
    """Raised when an input file does not match its documented layout."""


@dataclass(frozen=True)
class LabelSchema:
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if len(self.class_names) != 7:
            raise ValueError(f"schema needs exactly 7 classes, got {len(self.class_names)}")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}; expected one of {self.class_names}") from None


DEFAULT_SCHEMA = LabelSchema()


@dataclass
class Dataset:
    """Images ``(n, H, W, C)`` float32 in [0, 1], label distributions
    ``(n, 7)`` and a split tag per example.

    ``masks`` is only populated by the synthetic generator (bar regions).
    """

    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    schema: LabelSchema = DEFAULT_SCHEMA
    provenance: str = ""
    masks: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.splits = np.asarray(self.splits, dtype="<U5")
        n = len(self.images)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, H, W, C), got shape {self.images.shape}")
        if self.labels.shape != (n, self.schema.n_classes):
            raise ValueError(f"labels shape {self.labels.shape} does not match {n} images")
        if self.splits.shape != (n,):
            raise ValueError("one split tag per example required")
        bad = set(np.unique(self.splits)) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self) -> np.ndarray:
        # np.argmax picks the lowest index on ties
        return np.argmax(self.labels, axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            splits=self.splits[idx],
            masks=None if self.masks is None else self.masks[idx],
        )

    def split(self, name: str) -> "Dataset":
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return self.subset(np.flatnonzero(self.splits == name))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        arrays = dict(
            images=self.images, labels=self.labels, splits=self.splits,
            class_names=np.array(self.schema.class_names),
            provenance=np.array(self.provenance),
        )
        if self.masks is not None:
            arrays["masks"] = self.masks
        with open(path, "wb") as fh:
            np.savez_compressed(fh, **arrays)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        with np.load(path, allow_pickle=False) as z:
            return cls(
                images=z["images"], labels=z["labels"], splits=z["splits"],
                schema=LabelSchema(tuple(str(s) for s in z["class_names"])),
                provenance=str(z["provenance"]),
                masks=z["masks"] if "masks" in z.files else None,
            )


def one_hot(indices, n_classes: int = 7) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros((len(indices), n_classes), dtype=np.float64)
    out[np.arange(len(indices)), indices] = 1.0
    return out


def replicate_channels(gray: np.ndarray) -> np.ndarray:
    """``(..., H, W)`` or ``(..., H, W, 1)`` -> ``(..., H, W, 3)``."""
    if gray.shape[-1] != 1:
        gray = gray[..., None]
    return np.repeat(gray, 3, axis=-1)


def load_dataset(path: str | Path) -> Dataset:
    """Load either a FER-format CSV or a saved ``.npz`` dataset."""
    path = Path(path)
    if path.suffix == ".csv":
        return load_fer_csv(path)
    return Dataset.load(path)


# --------------------------------------------------------------------- FER2013

def _parse_pixels(text: str, lineno: int) -> np.ndarray:
    parts = text.split()
    if len(parts) != IMAGE_SIZE * IMAGE_SIZE:
        raise DataFormatError(
            f"line {lineno}: malformed row, expected {IMAGE_SIZE * IMAGE_SIZE} pixels, got {len(parts)}"
        )
    try:
        values = np.array([int(p) for p in parts], dtype=np.int64)
    except ValueError:
        raise DataFormatError(f"line {lineno}: malformed row, non-integer pixel value") from None
    if values.min() < 0 or values.max() > 255:
        raise DataFormatError(f"line {lineno}: malformed row, pixel outside [0, 255]")
    return values.astype(np.uint8)


def load_fer_csv(path: str | Path) -> Dataset:
    """Parse a FER2013-style ``emotion,pixels,Usage`` CSV.

    Pixels are scaled by 1/255 and the single gray channel is replicated to
    three channels. Usage tags map Training/PublicTest/PrivateTest to
    train/val/test.
    """
    path = Path(path)
    pixels, labels, splits = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["emotion", "pixels", "Usage"]:
            raise DataFormatError(f"{path}: expected header 'emotion,pixels,Usage', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"line {lineno}: malformed row, expected 3 fields, got {len(row)}")
            emotion, pix, usage = row
            try:
                label = int(emotion)
            except ValueError:
                raise DataFormatError(f"line {lineno}: emotion index {emotion!r} is not an integer") from None
            if not 0 <= label <= 6:
                raise DataFormatError(f"line {lineno}: emotion index {label} outside [0, 6]")
            if usage not in FER_USAGE:
                raise DataFormatError(f"line {lineno}: unknown usage tag {usage!r}")
            pixels.append(_parse_pixels(pix, lineno))
            labels.append(label)
            splits.append(FER_USAGE[usage])
    gray = np.stack(pixels).reshape(-1, IMAGE_SIZE, IMAGE_SIZE, 1) if pixels else \
        np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 1), np.uint8)
    images = replicate_channels(gray.astype(np.float32) / _INV255)
    return Dataset(images, one_hot(labels), np.array(splits, dtype="<U5"), provenance=f"fer-csv:{path.name}")


def write_fer_csv(dataset: Dataset, path: str | Path) -> Path:
    """Serialize a gray-replicated dataset back to the FER CSV layout.

    Labels are written as their argmax class, so soft labels do not survive.
    """
    path = Path(path)
    if dataset.image_shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"FER CSV stores 48x48 images, got {dataset.image_shape}")
    chans = dataset.images
    if not (np.array_equal(chans[..., 0], chans[..., 1]) and np.array_equal(chans[..., 0], chans[..., 2])):
        raise ValueError("FER CSV stores grayscale images; channels differ")
    gray = np.round(chans[..., 0] * 255).astype(np.int64).reshape(len(dataset), -1)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["emotion", "pixels", "Usage"])
        for label, row, split in zip(dataset.class_indices(), gray, dataset.splits):
            writer.writerow([int(label), " ".join(map(str, row)), FER_USAGE_INV[str(split)]])
    tmp.replace(path)
    return path


# ------------------------------------------------------------------------ FER+

def read_ferplus_votes(path: str | Path) -> np.ndarray:
    """Return the ``(n, 10)`` integer vote matrix of a FER+ label CSV."""
    votes = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 12:
                raise DataFormatError(f"line {lineno}: expected usage, image name and 10 vote columns")
            try:
                v = [int(x) for x in row[2:]]
            except ValueError:
                raise DataFormatError(f"line {lineno}: vote columns must be integers") from None
            if min(v) < 0:
                raise DataFormatError(f"line {lineno}: negative vote count")
            votes.append(v)
    return np.array(votes, dtype=np.int64).reshape(-1, 10)


def ferplus_targets(votes: np.ndarray, mode: str = "onehot") -> tuple[np.ndarray, np.ndarray]:
    """Turn FER+ vote rows into schema labels.

    Returns ``(keep, labels)`` where ``keep`` marks rows whose plurality
    winner is one of the seven target classes. Ties go to the lowest column
    in the FER+ column order; rows with no votes are dropped.
    """
    votes = np.asarray(votes, dtype=np.int64)
    if votes.ndim != 2 or votes.shape[1] != 10:
        raise ValueError(f"votes must be (n, 10), got {votes.shape}")
    if (votes < 0).any():
        raise ValueError("negative vote count")
    winner = np.argmax(votes, axis=1)
    keep = (winner < 7) & (votes.sum(axis=1) > 0)
    kept = votes[keep]
    if mode == "onehot":
        labels = one_hot([FERPLUS_TO_SCHEMA[w] for w in winner[keep]])
    elif mode == "distribution":
        labels = np.zeros((len(kept), 7))
        labels[:, list(FERPLUS_TO_SCHEMA)] = kept[:, :7]
        labels /= labels.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown FER+ label mode {mode!r}")
    return keep, labels


def merge_ferplus(base: Dataset, votes_path: str | Path, mode: str = "onehot") -> Dataset:
    """Relabel a FER2013 dataset with FER+ plurality votes, dropping rows
    won by contempt / unknown / not-face."""
    votes = read_ferplus_votes(votes_path)
    if len(votes) != len(base):
        raise DataFormatError(f"FER+ has {len(votes)} rows but the base dataset has {len(base)}")
    keep, labels = ferplus_targets(votes, mode)
    merged = base.subset(np.flatnonzero(keep))
    merged.labels = labels
    merged.provenance = f"{base.provenance}+ferplus[{mode}]:{Path(votes_path).name}"
    return merged


# ---------------------------------------------------------------------- RAF-DB

def read_mapping(path: str | Path) -> dict[int, str]:
    """Read a ``label = class-name`` mapping file (``#`` starts a comment)."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        mapping[int(key)] = value
    return mapping


def _stratified_val(splits: np.ndarray, classes: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    splits = splits.copy()
    rng = np.random.default_rng(seed)
    for k in np.unique(classes):
        idx = np.flatnonzero((classes == k) & (splits == "train"))
        n_val = int(round(fraction * len(idx)))
        splits[rng.permutation(idx)[:n_val]] = "val"
    return splits


def load_raf_db(
    root: str | Path,
    list_file: str | Path,
    mapping: dict[int, str] | None = None,
    val_fraction: float = 0.0,
    seed: int = 0,
) -> Dataset:
    """Load RAF-DB single-label images listed as ``<image-name> <label-int>``.

    Images are bilinearly resized to 48x48. Names starting with ``test``
    go to the test split, the rest to train; ``val_fraction`` carves a
    stratified validation split out of train.
    """
    root = Path(root)
    mapping = DEFAULT_RAF_MAPPING if mapping is None else mapping
    schema = DEFAULT_SCHEMA
    entries = []
    for lineno, line in enumerate(Path(list_file).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataFormatError(f"{list_file}:{lineno}: expected '<image-name> <label-int>'")
        name, raw = parts[0], int(parts[1])
        if raw not in mapping:
            raise DataFormatError(f"{list_file}:{lineno}: label {raw} not in mapping {sorted(mapping)}")
        entries.append((name, schema.index(mapping[raw])))
    missing = [name for name, _ in entries if not (root / name).is_file()]
    if missing:
        raise FileNotFoundError(f"missing RAF-DB images under {root}: {', '.join(missing)}")
    images = np.stack([read_image(root / name, IMAGE_SIZE) for name, _ in entries]) if entries else \
        np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), np.float32)
    classes = np.array([k for _, k in entries], dtype=np.int64)
    splits = np.array(["test" if name.startswith("test") else "train" for name, _ in entries], dtype="<U5")
    if val_fraction > 0:
        splits = _stratified_val(splits, classes, val_fraction, seed)
    return Dataset(images, one_hot(classes), splits, schema, provenance=f"raf-db:{Path(list_file).name}")


# ------------------------------------------------------------------- synthetic

BAR_PERIOD = 4.0
BAR_WIDTH = 2.0
# Every class carries the same total bar length, so the amount of ink (and of
# empty background) says nothing about the class; only the layout does.
BAR_TOTAL_LENGTH = 64.0


def render_bars(n_bars: int, rng: np.random.Generator, size: int = IMAGE_SIZE):
    """Render ``n_bars`` anti-aliased, nearly horizontal parallel bars of
    length ``BAR_TOTAL_LENGTH / n_bars``.

    Returns the gray image (quantized to multiples of 1/255) and the
    bar-region mask: the tilted rectangle enclosing all bars.
    """
    theta = rng.uniform(-0.15, 0.15)
    cy, cx = (size - 1) / 2 + rng.uniform(-2, 2, 2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    along = dx * np.cos(theta) + dy * np.sin(theta)
    across = -dx * np.sin(theta) + dy * np.cos(theta)
    length = BAR_TOTAL_LENGTH / n_bars
    cover = np.zeros((size, size))
    for off in (np.arange(n_bars) - (n_bars - 1) / 2) * BAR_PERIOD:
        c = np.clip(BAR_WIDTH / 2 + 0.5 - np.abs(across - off), 0, 1) * \
            np.clip(length / 2 + 0.5 - np.abs(along), 0, 1)
        cover = np.maximum(cover, c)
    img = 0.2 + 0.65 * cover + rng.normal(0.0, 0.04, (size, size))
    q = np.round(np.clip(img, 0.0, 1.0) * 255)
    half_height = (n_bars - 1) / 2 * BAR_PERIOD + BAR_WIDTH / 2 + 0.5
    region = (np.abs(along) <= length / 2 + 0.5) & (np.abs(across) <= half_height)
    return q.astype(np.float32) / _INV255, region


def generate_synthetic_dataset(n_per_class: int, seed: int = 0) -> Dataset:
    """Seven procedural classes: class ``k`` shows ``k + 2`` bars sharing a
    fixed total length (two long bars for class 0, eight short dashes for
    class 6).

    Deterministic in ``seed``; each class is split 70/15/15 into
    train/val/test.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    images, masks, classes, splits = [], [], [], []
    n_train = int(round(0.70 * n_per_class))
    n_val = int(round(0.15 * n_per_class))
    for k in range(7):
        tags = np.array(["train"] * n_train + ["val"] * n_val
                        + ["test"] * (n_per_class - n_train - n_val), dtype="<U5")[:n_per_class]
        tags = tags[rng.permutation(n_per_class)]
        for i in range(n_per_class):
            img, mask = render_bars(k + 2, rng)
            images.append(img)
            masks.append(mask)
            classes.append(k)
            splits.append(tags[i])
    return Dataset(
        replicate_channels(np.stack(images)),
        one_hot(classes),
        np.array(splits, dtype="<U5"),
        provenance=f"synthetic-bars:n={n_per_class}:seed={seed}",
        masks=np.stack(masks),
    )
