"""Dataset container, loaders, normalisation, splitting and a synthetic generator."""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PARTITION_KEYS = ("informative", "redundant", "distractor")


class DatasetError(ValueError):
    pass


class CsvFormatError(DatasetError):
    def __init__(self, message, line):
        self.line = line
        super().__init__(f"line {line}: {message}")


class RaggedRowError(CsvFormatError):
    pass


class NonNumericCellError(CsvFormatError):
    pass


class MissingLabelColumnError(CsvFormatError):
    pass


class IdxFormatError(DatasetError):
    pass


@dataclass
class Dataset:
    """Samples ``X`` (N x D) with 1-based integer labels ``y`` in [1, C]."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    feature_names: list | None = None
    image_shape: tuple | None = None
    ground_truth: dict | None = None
    label_values: list | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise DatasetError(f"X must be 2-D, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise DatasetError(f"{self.y.size} labels for {self.X.shape[0]} rows")
        if self.y.size and (self.y.min() < 1 or self.y.max() > self.n_classes):
            raise DatasetError(f"labels must lie in [1, {self.n_classes}]")
        if self.ground_truth is not None:
            self.ground_truth = {k: np.asarray(v, dtype=np.int64) for k, v in self.ground_truth.items()}
            allidx = np.concatenate([self.ground_truth[k] for k in PARTITION_KEYS])
            if np.sort(allidx).tolist() != list(range(self.n_features)):
                raise DatasetError("ground-truth partition must be disjoint and cover every feature")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(self, X=self.X[rows], y=self.y[rows])

    def with_X(self, X) -> "Dataset":
        return replace(self, X=X)


@dataclass
class SplitSpec:
    parts: list
    seed: int

    @property
    def train(self):
        return self.parts[0]

    @property
    def test(self):
        return self.parts[-1]


def split(dataset_or_n, fractions=(0.9, 0.1), seed: int = 0) -> SplitSpec:
    """Seeded shuffle followed by contiguous assignment to each fraction."""
    n = dataset_or_n if isinstance(dataset_or_n, (int, np.integer)) else dataset_or_n.n_samples
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    order = Rng(seed).derive("split").permutation(n)
    parts, start = [], 0
    for i, f in enumerate(fractions):
        stop = n if i == len(fractions) - 1 else start + int(np.floor(f * n + 1e-9))
        parts.append(order[start:stop])
        start = stop
    return SplitSpec(parts, seed)


def _code_labels(raw):
    values = sorted(set(raw))
    try:
        values = sorted(values, key=float)
    except ValueError:
        pass
    lookup = {v: i + 1 for i, v in enumerate(values)}
    return np.array([lookup[v] for v in raw], dtype=np.int64), values


def load_csv(path, label_column: int = -1, has_header: bool = False, delimiter: str = ",") -> Dataset:
    """Read a numeric CSV; labels (any strings) are recoded to 1..C in sorted order."""
    rows, labels = [], []
    names = None
    width = None
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter=delimiter), start=1):
            if not row:
                continue
            if has_header and names is None:
                names = [c.strip() for c in row]
                continue
            if width is None:
                width = len(row)
                if not -width <= label_column < width:
                    raise MissingLabelColumnError(f"label column {label_column} absent ({width} columns)", lineno)
            elif len(row) != width:
                raise RaggedRowError(f"expected {width} fields, found {len(row)}", lineno)
            col = label_column % width
            labels.append(row[col].strip())
            try:
                rows.append([float(c) for j, c in enumerate(row) if j != col])
            except ValueError:
                bad = next(c for j, c in enumerate(row) if j != col and not _is_float(c))
                raise NonNumericCellError(f"non-numeric cell {bad!r}", lineno) from None
    if width is None:
        raise DatasetError(f"{path}: no data rows")
    y, values = _code_labels(labels)
    if names is not None:
        names = [n for j, n in enumerate(names) if j != label_column % width]
    X = np.array(rows, dtype=np.float64).reshape(len(rows), width - 1)
    return Dataset(X, y, len(values), feature_names=names, label_values=values)


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def save_csv(dataset: Dataset, path, header: bool = True):
    """Write features then label (last column); floats use round-trip repr."""
    labels = dataset.y if dataset.label_values is None else [dataset.label_values[i - 1] for i in dataset.y]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if header:
            names = dataset.feature_names or [f"f{j}" for j in range(dataset.n_features)]
            w.writerow(list(names) + ["label"])
        for row, lab in zip(dataset.X, labels):
            w.writerow([repr(float(v)) for v in row] + [lab])


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf, magic, path):
    ndim = 3 if magic == IDX_IMAGES_MAGIC else 1
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"{path}: truncated header ({len(buf)} bytes)")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = int(np.prod(dims))
    actual = len(buf) - header
    if actual < expected:
        raise IdxFormatError(f"{path}: truncated payload, expected {expected} bytes, found {actual}")
    return np.frombuffer(buf, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair (MNIST layout, optionally gzipped).

    Pixels are scaled to [0, 1]; label byte ``k`` becomes class ``k + 1``.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, h, w = images.shape
    X = images.reshape(n, h * w).astype(np.float64) / 255.0
    n_classes = int(labels.max()) + 1 if n else 1
    return Dataset(X, labels.astype(np.int64) + 1, n_classes, image_shape=(h, w),
                   label_values=list(range(n_classes)))


@dataclass
class Normalizer:
    """Per-feature affine map ``(x - shift) * scale`` fitted on training rows."""

    scheme: str
    shift: np.ndarray
    scale: np.ndarray

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.shift) * self.scale

    def apply(self, dataset: Dataset) -> Dataset:
        return dataset.with_X(self.transform(dataset.X))


def fit_normalizer(X, scheme: str = "minmax") -> Normalizer:
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    if scheme == "none":
        return Normalizer(scheme, np.zeros(d), np.ones(d))
    if scheme == "minmax":
        lo, hi = X.min(axis=0), X.max(axis=0)
        span = hi - lo
    elif scheme == "zscore":
        lo, span = X.mean(axis=0), X.std(axis=0)
    else:
        raise ValueError(f"unknown normalisation scheme {scheme!r}")
    # degenerate features map to 0
    scale = np.divide(1.0, span, out=np.zeros(d), where=span > 0)
    return Normalizer(scheme, lo, scale)


def normalize(dataset: Dataset, scheme: str = "minmax"):
    """Fit on ``dataset`` (the training rows) and return ``(normalised, normalizer)``.

    Test rows go through ``normalizer.apply``; values outside the training
    range are left outside [0, 1].
    """
    norm = fit_normalizer(dataset.X, scheme)
    return norm.apply(dataset), norm


def make_madelon_like(n_samples: int = 2600, n_informative: int = 5, n_redundant: int = 15,
                      n_distractor: int = 480, class_sep: float = 2.0, noise_std: float = 0.1,
                      seed: int = 0, n_classes: int = 2) -> Dataset:
    """Synthetic data with a known informative / redundant / distractor partition.

    * informative: class ``c`` is a unit Gaussian around ``class_sep / 2 * s_c``,
      ``s_c`` a vertex of {-1, +1}^n_informative.  Two classes use an antipodal
      pair, so each informative coordinate separates the class means by
      ``class_sep``; more classes use distinct random vertices.
    * redundant: ``informative @ A.T + noise_std * N(0, 1)``, A ~ U(-1, 1)
      drawn once (recorded as ``metadata["redundant_coefficients"]``).
    * distractor: independent N(0, 1).

    Labels are balanced, rows and columns are shuffled, and the shuffled
    column positions of each group are stored in ``ground_truth``.
    """
    counts = dict(n_samples=n_samples, n_informative=n_informative,
                  n_redundant=n_redundant, n_distractor=n_distractor)
    for name, v in counts.items():
        if int(v) != v or v < 0:
            raise DatasetError(f"{name} must be a nonnegative integer, got {v}")
    if n_informative < 1:
        raise DatasetError("n_informative must be at least 1")
    if n_classes < 2:
        raise DatasetError("n_classes must be at least 2")
    if n_classes > 2 ** n_informative:
        raise DatasetError(f"{n_classes} classes need more than {n_informative} informative features")
    rng = Rng(seed)

    if n_classes == 2:
        s = np.where(rng.derive("signs").random(n_informative) < 0.5, -1.0, 1.0)
        vertices = np.stack([s, -s])
    else:
        vrng = rng.derive("vertices")
        chosen = []
        while len(chosen) < n_classes:
            v = tuple(np.where(vrng.random(n_informative) < 0.5, -1.0, 1.0))
            if v not in chosen:
                chosen.append(v)
        vertices = np.array(chosen)
    centers = class_sep / 2.0 * vertices

    y = np.arange(n_samples) % n_classes + 1
    y = y[rng.derive("labels").permutation(n_samples)]
    informative = centers[y - 1] + rng.derive("informative").normal(size=(n_samples, n_informative))
    coef = rng.derive("coef").uniform(-1.0, 1.0, size=(n_redundant, n_informative))
    redundant = informative @ coef.T + noise_std * rng.derive("redundant").normal(size=(n_samples, n_redundant))
    distractor = rng.derive("distractor").normal(size=(n_samples, n_distractor))

    X = np.hstack([informative, redundant, distractor])
    d = X.shape[1]
    cols = rng.derive("columns").permutation(d)
    X = X[:, cols]
    position = np.empty(d, dtype=np.int64)
    position[cols] = np.arange(d)
    bounds = np.cumsum([0, n_informative, n_redundant, n_distractor])
    truth = {k: np.sort(position[bounds[i]:bounds[i + 1]]) for i, k in enumerate(PARTITION_KEYS)}
    meta = {
        "generator": "madelon_like",
        "params": dict(counts, class_sep=class_sep, noise_std=noise_std, seed=seed, n_classes=n_classes),
        "redundant_coefficients": coef.tolist(),
        "informative_columns_in_generation_order": position[:n_informative].tolist(),
    }
    return Dataset(X, y, n_classes, ground_truth=truth, metadata=meta)


MADELON_PRESET = dict(n_samples=2600, n_informative=5, n_redundant=15, n_distractor=480)


def save_synthetic(dataset: Dataset, csv_path, json_path):
    """CSV of the data plus a JSON sidecar with the partition and generator parameters."""
    save_csv(dataset, csv_path)
    sidecar = {
        "ground_truth": {k: v.tolist() for k, v in (dataset.ground_truth or {}).items()},
        "n_classes": dataset.n_classes,
        "n_features": dataset.n_features,
        "n_samples": dataset.n_samples,
        **dataset.metadata,
    }
    with open(json_path, "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_ground_truth(json_path):
    with open(json_path) as f:
        doc = json.load(f)
    return {k: np.asarray(v, dtype=np.int64) for k, v in doc["ground_truth"].items()}
