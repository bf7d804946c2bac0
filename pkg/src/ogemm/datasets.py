"""Dataset ingestion: IDX image sets and one-hot materials tables."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "OGEMM_DATA_DIR"
IMAGE_DATASETS = ("mnist", "fashion-mnist", "kmnist")
MAGNETIC_LABELS = {"NM": 0, "AFM": 1, "FM": 1}
MAGNETIC_CLASSES = ("NM", "AFM+FM")


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    split: str = "train"

    def __post_init__(self):
        if len(self.features) == 0:
            raise ParseError(f"empty {self.split} split")
        if len(self.features) != len(self.labels):
            raise ParseError("feature and label counts differ")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_histogram(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=self.n_classes)
        return {name: int(c) for name, c in zip(self.class_names, counts)}

    def subset(self, n: int | None, seed: int = 0) -> LabeledDataset:
        """First ``n`` samples of a seeded permutation (the whole set if ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_names, self.split)


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise ParseError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    """Array stored in an IDX file (raw or gzip-wrapped)."""
    path = Path(path)
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise ParseError(f"{path}: truncated header")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise ParseError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ParseError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", buf[4:header])
    size = int(np.prod(shape))
    if len(buf) - header < size:
        raise ParseError(f"{path}: truncated payload ({len(buf) - header} of {size} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=header).reshape(shape)


def load_idx(images_path: str | Path, labels_path: str | Path, split: str = "train",
             class_names: Sequence[str] | None = None) -> LabeledDataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images "
                         f"in {images_path}")
    n_classes = int(labels.max()) + 1 if labels.size else 0
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(max(n_classes, 10)))
    if labels.size and labels.max() >= len(names):
        raise ParseError(f"{labels_path}: label {labels.max()} outside {len(names)} classes")
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(feats, labels.astype(np.int64), names, split)


def write_idx(array: np.ndarray, path: str | Path, compress: bool = False) -> Path:
    """Write a uint8 array as IDX (used for fixtures)."""
    a = np.asarray(array, dtype=np.uint8)
    payload = struct.pack(">I", 0x00000800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(payload) if compress else payload)
    return path


def data_root() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _find(folder: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = folder / name
        if p.exists():
            return p
    return None


def locate_image_dataset(name: str, root: str | Path | None = None) -> dict[str, Path] | None:
    """Canonical train/test IDX files of ``name`` under ``root/name`` (or ``root``)."""
    root = Path(root) if root is not None else data_root()
    stems = {"train_images": "train-images-idx3-ubyte", "train_labels": "train-labels-idx1-ubyte",
             "test_images": "t10k-images-idx3-ubyte", "test_labels": "t10k-labels-idx1-ubyte"}
    for folder in (root / name, root / name.replace("-", "_"), root):
        found = {k: _find(folder, s) for k, s in stems.items()}
        if all(found.values()):
            return found
    return None


def load_image_dataset(name: str, root: str | Path | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    files = locate_image_dataset(name, root)
    if files is None:
        where = Path(root) if root is not None else data_root()
        raise FileNotFoundError(
            f"{name}: IDX files not found under {where}/{name}; download the four canonical "
            f"files (train/t10k images and labels) there or set {DATA_DIR_ENV}")
    return (load_idx(files["train_images"], files["train_labels"], "train"),
            load_idx(files["test_images"], files["test_labels"], "test"))


def load_materials_csv(path: str | Path, label_column: str = "label",
                       ignore_columns: Sequence[str] = ("id", "formula", "name")) -> LabeledDataset:
    """One-hot structural features with NM / AFM / FM labels, grouped NM vs AFM+FM."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file, header required") from None
        if label_column not in header:
            raise ParseError(f"{path}:1: no {label_column!r} column in header")
        li = header.index(label_column)
        keep = [i for i, h in enumerate(header) if i != li and h not in ignore_columns]
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            token = row[li].strip().upper()
            if token not in MAGNETIC_LABELS:
                raise ParseError(f"{path}:{lineno}: unknown label {row[li]!r} (expected NM, AFM or FM)")
            try:
                feats.append([float(row[i]) for i in keep])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric feature ({exc})") from None
            labels.append(MAGNETIC_LABELS[token])
    X = np.asarray(feats, dtype=float).reshape(len(feats), len(keep))
    if X.size and (X.min() < 0 or X.max() > 1):
        lo, hi = X.min(axis=0), X.max(axis=0)
        X = (X - lo) / np.where(hi > lo, hi - lo, 1.0)
    return LabeledDataset(X, np.asarray(labels, dtype=np.int64), MAGNETIC_CLASSES, "all")


def split_dataset(ds: LabeledDataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    order = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    tr, te = order[:cut], order[cut:]
    return (LabeledDataset(ds.features[tr], ds.labels[tr], ds.class_names, "train"),
            LabeledDataset(ds.features[te], ds.labels[te], ds.class_names, "test"))


def synthetic_materials_rows(n: int = 2000, seed: int = 0) -> tuple[list[str], list[list]]:
    """Schema-compatible stand-in for the 2D-materials table.

    Columns: one-hot prototype (12), one-hot magnetic-ion family (6), one-hot
    anion (6), one-hot layer count (4), then ``label`` in {NM, AFM, FM}. The
    labelling rule is a noisy function of the one-hot groups, so regimes can
    be compared but absolute accuracies mean nothing.
    """
    rng = np.random.default_rng(seed)
    groups = {"proto": 12, "ion": 6, "anion": 6, "layers": 4}
    header = ["id"] + [f"{g}_{i}" for g, k in groups.items() for i in range(k)] + ["label"]
    w = {g: rng.normal(0, 1.2, k) for g, k in groups.items()}
    pair = rng.normal(0, 1.0, (groups["proto"], groups["ion"]))
    rows = []
    for r in range(n):
        choice = {g: int(rng.integers(k)) for g, k in groups.items()}
        score = sum(w[g][choice[g]] for g in groups) + pair[choice["proto"], choice["ion"]] - 0.8
        score += rng.normal(0, 0.6)
        if score > 0:
            label = "FM" if rng.random() < 0.6 else "AFM"
        else:
            label = "NM"
        onehot = []
        for g, k in groups.items():
            v = [0] * k
            v[choice[g]] = 1
            onehot += v
        rows.append([f"m{r:05d}"] + onehot + [label])
    return header, rows


def write_synthetic_materials_csv(path: str | Path, n: int = 2000, seed: int = 0) -> Path:
    header, rows = synthetic_materials_rows(n, seed)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path
