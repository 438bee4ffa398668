"""Checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"EMXCKPT1"
    manifest_len u32       length of the manifest in bytes
    manifest     UTF-8 JSON (model description, schema, metadata)
    n_arrays     u32
    per array:
      name_len   u16, name (UTF-8)
      dtype      4 ASCII bytes: b"f4le" (float32) or b"i8le" (int64)
      ndim       u8, then ndim x u32 dims
      data       row-major little-endian values

Parameters and batch-norm buffers are stored under their module path names.
"""
from __future__ import annotations

import datetime as _dt
import json
import platform
import struct
from pathlib import Path

import numpy as np
import torch

from .dataio import CLASS_NAMES
from .models import Classifier, classifier_from_description

MAGIC = b"EMXCKPT1"
DTYPES = {b"f4le": np.dtype("<f4"), b"i8le": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def write_arrays(path: str | Path, manifest: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    blob = json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if np.issubdtype(arr.dtype, np.integer):
                tag, arr = b"i8le", arr.astype("<i8")
            else:
                tag, arr = b"f4le", arr.astype("<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(tag)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    tmp.replace(path)
    return path


def read_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (mlen,) = struct.unpack("<I", take(4))
    manifest = json.loads(take(mlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        tag = take(4)
        if tag not in DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag!r} for {name}")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    return manifest, arrays


def save_model(model: Classifier, path: str | Path, metadata: dict | None = None) -> Path:
    manifest = {
        "format": "emoxnet-checkpoint",
        "version": 1,
        "model": model.describe(),
        "schema": list(CLASS_NAMES),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "host": platform.node(),
        "metadata": metadata or {},
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    return write_arrays(path, manifest, arrays)


def load_model(path: str | Path) -> tuple[Classifier, dict]:
    manifest, arrays = read_arrays(path)
    if manifest.get("format") != "emoxnet-checkpoint":
        raise CheckpointError(f"{path}: unexpected format {manifest.get('format')!r}")
    model = classifier_from_description(manifest["model"])
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"{path}: missing arrays {missing}, unexpected arrays {unexpected}")
    model.eval()
    return model, manifest
