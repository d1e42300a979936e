"""Plain-text tables, CSV emission and IDX (MNIST-style) parsing.

CSV rule: floats are written with 17 significant digits (``format(v, ".17g")``),
with ``.0`` appended when that text would otherwise read back as an integer.
Integers and strings are written verbatim, ``None`` as an empty field. Reading
a file produced here returns an equal table.
"""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .numerics import Dataset

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Table:
    """Column names plus rows of scalars, in a fixed column order."""

    columns: list[str]
    rows: list[tuple] = field(default_factory=list)

    def append(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} values, table has {len(self.columns)} columns")
        self.rows.append(tuple(values))

    def column(self, name: str) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Table) and self.columns == other.columns
                and [tuple(r) for r in self.rows] == [tuple(r) for r in other.rows])


def format_value(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
        text = format(v, ".17g")
        if not any(ch in text for ch in ".en"):
            text += ".0"
        return text
    return str(v)


def parse_value(text: str) -> Any:
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def emit_csv(table: Table, path) -> None:
    """Write ``table`` as CSV with a header row (``\\n`` line endings)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([format_value(v) for v in row])


def read_csv(path) -> Table:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        rows = [tuple(parse_value(x) for x in r) for r in reader]
    return Table(header, rows)


def write_dataset_csv(data: Dataset, path) -> None:
    """One row per datapoint: the features, then the label in the last column."""
    t = Table([f"x{j}" for j in range(data.dim)] + ["label"])
    for x, y in zip(data.features, data.labels):
        t.append(*map(float, x), float(y))
    emit_csv(t, path)


def read_dataset_csv(path) -> Dataset:
    t = read_csv(path)
    if not t.rows:
        raise ValueError(f"{path}: dataset file has no rows")
    arr = np.array(t.rows, dtype=float)
    if arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    return Dataset(arr[:, :-1], arr[:, -1])


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, what: str) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x} for {what} (expected 0x{magic:08x})")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(shape))
    if len(body) < need:
        raise IdxFormatError(f"{path}: truncated file, expected {need} bytes of data, found {len(body)}")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(shape)


def read_idx(images_path, labels_path, class_pair: Sequence[int] = (0, 1)) -> Dataset:
    """Load an IDX image/label pair, keep two classes, scale pixels to [0, 1].

    Images are flattened row-major; label ``class_pair[0]`` maps to 0 and
    ``class_pair[1]`` to 1. Gzipped files (``.gz``) are read transparently.
    """
    a, b = class_pair
    if a == b:
        raise ValueError("class_pair needs two distinct classes")
    images = _read_idx(images_path, IMAGE_MAGIC, "images")
    labels = _read_idx(labels_path, LABEL_MAGIC, "labels")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: label file must be one-dimensional")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels")
    keep = (labels == a) | (labels == b)
    if not keep.any():
        raise ValueError(f"no samples with labels {a} or {b}: empty dataset")
    x = images[keep].reshape(int(keep.sum()), -1).astype(float) / 255.0
    y = (labels[keep] == b).astype(float)
    return Dataset(x, y)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 array as an IDX file (used for test fixtures)."""
    arr = np.asarray(array, dtype=np.uint8)
    if magic & 0xFF != arr.ndim:
        raise ValueError("the low byte of the magic must equal the array rank")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())
