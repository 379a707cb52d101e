"""Datasets: IDX / CSV loading, labeled-unlabeled splitting, synthetic mixtures."""

import csv
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.features),):
                raise ValueError("labels and features differ in length")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if self.labels is not None and self.labels.size else 0

    def subset(self, idx, name=None, keep_labels=True):
        labels = self.labels[idx] if (keep_labels and self.labels is not None) else None
        return Dataset(self.features[idx], labels, name or self.name)


def normalize_features(x: np.ndarray) -> np.ndarray:
    """Per-feature min-max rescale to [-1, 1].

    Data already inside [-1, 1] is returned unchanged, so this is idempotent.
    Constant columns map to 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or (x.min() >= -1.0 and x.max() <= 1.0):
        return x
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    out = 2.0 * (x - lo) / span - 1.0
    out[:, hi == lo] = 0.0
    return np.clip(out, -1.0, 1.0)


def split(ds: Dataset, percent: float, seed: int, min_labeled: int = 1):
    """Shuffle and split into (labeled S_l, unlabeled S_d).

    ``percent`` is the fraction that goes to the unlabeled pool; its labels
    are dropped.
    """
    if ds.labels is None:
        raise ValueError("split needs a labeled dataset")
    if not 0.0 < percent <= 1.0:
        raise ValueError(f"percent must lie in (0, 1], got {percent}")
    n = len(ds)
    n_d = int(round(percent * n))
    n_l = n - n_d
    if n_l < max(1, min_labeled):
        raise ValueError(f"percent={percent} leaves {n_l} labeled rows; need at least {max(1, min_labeled)}")
    perm = np.random.default_rng(seed).permutation(n)
    s_d = ds.subset(np.sort(perm[:n_d]), name=f"{ds.name}:unlabeled", keep_labels=False)
    s_l = ds.subset(np.sort(perm[n_d:]), name=f"{ds.name}:labeled")
    return s_l, s_d


def train_test_split(ds: Dataset, n_test: int, seed: int):
    """Stratified holdout of ``n_test`` rows (proportional per class)."""
    rng = np.random.default_rng(seed)
    test_idx = []
    classes = np.unique(ds.labels)
    for i, c in enumerate(classes):
        members = np.flatnonzero(ds.labels == c)
        share = n_test // len(classes) + (1 if i < n_test % len(classes) else 0)
        test_idx.append(rng.choice(members, size=share, replace=False))
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(ds), dtype=bool)
    mask[test_idx] = False
    return ds.subset(np.flatnonzero(mask), name=f"{ds.name}:train"), ds.subset(test_idx, name=f"{ds.name}:test")


def synth_mixture(m: int, n_per_class: int, d: int, separation: float, seed: int) -> Dataset:
    """Isotropic unit-variance Gaussian blobs with centres on a circle in the first two axes.

    Rows are rescaled jointly to [-1, 1] per feature. Returns rows grouped by class.
    """
    if m < 2 or d < 2:
        raise ValueError("need m >= 2 classes and d >= 2 dimensions")
    rng = np.random.default_rng(seed)
    centres = mixture_centres(m, d, separation)
    labels = np.repeat(np.arange(m), n_per_class)
    x = centres[labels] + rng.standard_normal((labels.size, d))
    return Dataset(_rescale(x), labels, name=f"mixture{m}")


def mixture_centres(m, d, separation):
    angles = 2.0 * np.pi * np.arange(m) / m
    centres = np.zeros((m, d))
    centres[:, 0] = separation * np.cos(angles)
    centres[:, 1] = separation * np.sin(angles)
    return centres


def _rescale(x):
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return 2.0 * (x - lo) / span - 1.0


# ------------------------------------------------------------------ IDX


def _read_idx(path, expected_magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: file is {len(raw)} bytes, too short for an IDX header")
    magic = int.from_bytes(raw[0:4], "big")
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes for dims {dims}, got {len(raw)} (payload starts at byte {header})"
        )
    data = np.frombuffer(raw, dtype=np.uint8, offset=header)
    return data.reshape(dims)


def load_idx(images_path, labels_path=None, name=None) -> Dataset:
    """IDX ubyte images (0x00000803), optionally with a labels file (0x00000801).

    Pixels are mapped to [-1, 1] by ``x / 127.5 - 1``.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    n = images.shape[0]
    x = images.reshape(n, -1).astype(np.float64) / 127.5 - 1.0
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if labels.shape != (n,):
            raise DataFormatError(f"{labels_path}: {labels.shape[0]} labels for {n} images")
    return Dataset(x, labels, name or str(images_path))


def write_idx(path, array, magic):
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(int(magic).to_bytes(4, "big"))
        for dim in array.shape:
            fh.write(int(dim).to_bytes(4, "big"))
        fh.write(array.tobytes())


# ------------------------------------------------------------------ CSV


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, normalize=True, name=None) -> Dataset:
    """First column is the integer label, the rest are features.

    A header row is detected by a non-numeric first cell.
    """
    labels, rows = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not _is_number(row[0].strip()):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(f"{path}: line {lineno} has {len(row)} columns, expected {width}")
            try:
                label = float(row[0])
                feats = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            if label != int(label):
                raise DataFormatError(f"{path}: line {lineno}: label {row[0]!r} is not an integer")
            labels.append(int(label))
            rows.append(feats)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    if width < 2:
        raise DataFormatError(f"{path}: need a label column and at least one feature column")
    x = np.array(rows, dtype=np.float64)
    if normalize:
        x = normalize_features(x)
    return Dataset(x, np.array(labels), name or str(path))


def save_csv(path, ds: Dataset):
    labels = ds.labels if ds.labels is not None else np.zeros(len(ds), dtype=np.int64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{j}" for j in range(ds.dim)])
        for y, row in zip(labels, ds.features):
            w.writerow([int(y)] + [repr(float(v)) for v in row])
