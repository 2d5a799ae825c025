"""Dataset ingestion, standardization, splitting and synthetic 2-D generators."""

from __future__ import annotations

import csv
import gzip
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
MISSING_TOKENS = frozenset({"", "?", "na", "nan", "null", "none"})
SPLIT_MODES = ("nominal-half", "provided", "one-vs-rest", "none")
SYNTHETIC_KINDS = ("ring", "two-moons", "gaussian-blobs")


@dataclass
class Dataset:
    """Feature matrix with optional binary anomaly labels (1 = anomaly)."""

    features: np.ndarray
    labels: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    classes: np.ndarray | None = None
    row_ids: np.ndarray | None = None
    rejected_rows: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or Inf")
        n, d = self.features.shape
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(d)]
        if len(self.feature_names) != d:
            raise DimensionError(f"{len(self.feature_names)} feature names for {d} columns")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(np.int64)
            if self.labels.shape != (n,):
                raise DimensionError(f"labels shape {self.labels.shape} does not match {n} rows")
            if not np.all((self.labels == 0) | (self.labels == 1)):
                raise DataError("labels must be binary (0 nominal, 1 anomaly)")
        if self.row_ids is None:
            self.row_ids = np.arange(n)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return replace(
            self,
            features=self.features[rows],
            labels=None if self.labels is None else self.labels[rows],
            classes=None if self.classes is None else self.classes[rows],
            row_ids=self.row_ids[rows],
        )


@dataclass
class CsvSchema:
    """How to read a delimited file.

    ``label_column`` and ``categorical`` refer to column names (or indices as
    strings when the file has no header and no ``column_names``).  When
    ``anomaly_labels`` is given, label values in it map to 1 and everything
    else to 0; ``nominal_labels`` is the opposite convention.  Otherwise the
    label column must already be 0/1, or is kept only as ``classes``.
    """

    label_column: str | None = None
    categorical: Sequence[str] = ()
    header: bool = True
    column_names: Sequence[str] | None = None
    anomaly_labels: Sequence[str] | None = None
    nominal_labels: Sequence[str] | None = None
    drop: Sequence[str] = ()
    delimiter: str = ","


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), newline="")
    return open(path, newline="")


def _resolve_labels(raw: np.ndarray, schema: CsvSchema) -> np.ndarray | None:
    if schema.anomaly_labels is not None:
        return np.isin(raw, list(schema.anomaly_labels)).astype(np.int64)
    if schema.nominal_labels is not None:
        return (~np.isin(raw, list(schema.nominal_labels))).astype(np.int64)
    try:
        vals = raw.astype(np.float64)
    except ValueError:
        return None
    if np.all((vals == 0) | (vals == 1)):
        return vals.astype(np.int64)
    return None


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> Dataset:
    """Read a CSV file into a Dataset.

    Numeric columns keep their file order; each categorical column is then
    appended as one-hot columns in lexicographic level order.  Rows with a
    missing value are dropped (and counted); rows whose numeric fields do not
    parse raise ``DataError`` listing their line numbers.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with _open_text(path) as fh:
        rows = list(csv.reader(fh, delimiter=schema.delimiter))
    first_line = 1
    if schema.header:
        if not rows:
            raise DataError(f"{path} is empty")
        names = [h.strip() for h in rows[0]]
        rows = rows[1:]
        first_line = 2
    elif schema.column_names:
        names = list(schema.column_names)
    else:
        names = [str(i) for i in range(len(rows[0]))] if rows else []
    rows_with_lines = [(first_line + i, r) for i, r in enumerate(rows) if r]
    if not rows_with_lines:
        raise DataError(f"{path} contains no data rows")

    index = {name: i for i, name in enumerate(names)}
    for col in [schema.label_column, *schema.categorical, *schema.drop]:
        if col is not None and col not in index:
            raise DataError(f"column {col!r} not found in {path}")
    label_idx = index[schema.label_column] if schema.label_column is not None else None
    cat_idx = [index[c] for c in schema.categorical]
    skip = set(cat_idx) | {index[c] for c in schema.drop}
    if label_idx is not None:
        skip.add(label_idx)
    num_idx = [i for i in range(len(names)) if i not in skip]

    kept, bad_lines, wrong_width, rejected = [], [], [], 0
    for line, r in rows_with_lines:
        if len(r) != len(names):
            wrong_width.append(line)
            continue
        fields_ = [v.strip() for v in r]
        if any(fields_[i].lower() in MISSING_TOKENS for i in num_idx + cat_idx):
            rejected += 1
            continue
        try:
            nums = [float(fields_[i]) for i in num_idx]
        except ValueError:
            bad_lines.append(line)
            continue
        if not all(math.isfinite(v) for v in nums):
            rejected += 1
            continue
        kept.append((nums, [fields_[i] for i in cat_idx], fields_[label_idx] if label_idx is not None else None))
    if wrong_width or bad_lines:
        lines = sorted(wrong_width + bad_lines)
        shown = ", ".join(map(str, lines[:20])) + (" ..." if len(lines) > 20 else "")
        raise DataError(f"{path}: {len(lines)} unparseable row(s) at line(s) {shown}")
    if rejected:
        log.warning("%s: rejected %d row(s) with missing values", path, rejected)
    if not kept:
        raise DataError(f"{path}: no usable rows ({rejected} rejected for missing values)")

    numeric = np.array([k[0] for k in kept], dtype=np.float64).reshape(len(kept), len(num_idx))
    blocks, feature_names = [numeric], [names[i] for i in num_idx]
    for j, ci in enumerate(cat_idx):
        values = np.array([k[1][j] for k in kept])
        levels = sorted(set(values.tolist()))
        blocks.append((values[:, None] == np.array(levels)[None, :]).astype(np.float64))
        feature_names += [f"{names[ci]}={lv}" for lv in levels]
    features = np.concatenate(blocks, axis=1)

    labels = classes = None
    if label_idx is not None:
        classes = np.array([k[2] for k in kept])
        labels = _resolve_labels(classes, schema)
    return Dataset(features, labels, feature_names, classes=classes, rejected_rows=rejected)


def write_csv(data: Dataset, path: str | Path) -> None:
    """Write features (and a trailing ``label`` column, if any) losslessly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = list(data.feature_names) + (["label"] if data.labels is not None else [])
        writer.writerow(header)
        for i in range(data.n):
            row = [repr(float(v)) for v in data.features[i]]
            if data.labels is not None:
                row.append(str(int(data.labels[i])))
            writer.writerow(row)


def load_mat(path: str | Path, x_key: str = "X", y_key: str = "y") -> Dataset:
    """Read an ODDS-style MATLAB file with feature matrix ``X`` and 0/1 labels ``y``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    try:
        from scipy.io import loadmat

        doc = loadmat(path)
        x, y = np.asarray(doc[x_key], dtype=np.float64), np.asarray(doc[y_key]).ravel()
    except NotImplementedError:
        # MATLAB v7.3 files are HDF5 and stored transposed
        import h5py

        with h5py.File(path, "r") as fh:
            x = np.asarray(fh[x_key], dtype=np.float64).T
            y = np.asarray(fh[y_key]).ravel()
    except KeyError as exc:
        raise DataError(f"{path}: missing variable {exc}") from exc
    finite = np.all(np.isfinite(x), axis=1)
    rejected = int((~finite).sum())
    if rejected:
        log.warning("%s: rejected %d row(s) with missing values", path, rejected)
    return Dataset(x[finite], y[finite].astype(np.int64), rejected_rows=rejected)


def fit_standardization(features: np.ndarray, train_rows) -> tuple[np.ndarray, np.ndarray]:
    train_rows = np.asarray(train_rows, dtype=np.intp)
    if train_rows.size == 0:
        raise ContractError("standardization needs at least one training row")
    sub = features[train_rows]
    mean = sub.mean(axis=0)
    std = sub.std(axis=0)
    # constant features: centre only, so unseen values stay on the raw scale
    std = np.where(std < STD_FLOOR, 1.0, std)
    return mean, std


def standardize(data: Dataset, train_rows) -> Dataset:
    """Z-score every row using statistics of ``train_rows`` only."""
    mean, std = fit_standardization(data.features, train_rows)
    return replace(data, features=(data.features - mean) / std, mean=mean, std=std)


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "nominal-half"
    seed: int = 0
    train_fraction: float = 0.5
    nominal_class: str | None = None
    train_subsample: int | None = None

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ContractError(f"unknown split mode {self.mode!r}; expected one of {SPLIT_MODES}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ContractError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.mode == "one-vs-rest" and self.nominal_class is None:
            raise ContractError("one-vs-rest split needs nominal_class")


def one_vs_rest(data: Dataset, nominal_class) -> Dataset:
    if data.classes is None:
        raise ContractError("one-vs-rest needs multiclass labels")
    classes = np.asarray(data.classes).astype(str)
    if np.unique(classes).size < 2:
        raise ContractError("one-vs-rest needs at least two classes")
    labels = (classes != str(nominal_class)).astype(np.int64)
    return replace(data, labels=labels)


def split_indices(data: Dataset, spec: SplitSpec, provided: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of (train, test); train rows are nominal only except in mode ``none``."""
    if spec.mode == "none":
        return np.arange(data.n), np.arange(0)
    if spec.mode == "provided":
        if provided is None:
            raise ContractError("provided split needs a per-row train mask")
        provided = np.asarray(provided, dtype=bool)
        train, test = np.flatnonzero(provided), np.flatnonzero(~provided)
        if data.labels is not None:
            train = train[data.labels[train] == 0]
        return train, test
    if spec.mode == "one-vs-rest":
        data = one_vs_rest(data, spec.nominal_class)
    if data.labels is None:
        raise ContractError(f"split mode {spec.mode!r} needs labels")
    rng = np.random.default_rng(spec.seed)
    nominal = np.flatnonzero(data.labels == 0)
    perm = rng.permutation(nominal)
    n_train = int(round(spec.train_fraction * nominal.size))
    train = np.sort(perm[:n_train])
    test = np.sort(np.concatenate([perm[n_train:], np.flatnonzero(data.labels == 1)]))
    if spec.train_subsample is not None and train.size > spec.train_subsample:
        train = np.sort(rng.choice(train, size=spec.train_subsample, replace=False))
    return train, test


def split(data: Dataset, spec: SplitSpec, provided: np.ndarray | None = None) -> tuple[Dataset, Dataset]:
    if spec.mode == "one-vs-rest":
        data = one_vs_rest(data, spec.nominal_class)
    train, test = split_indices(data, spec, provided)
    return data.subset(train), data.subset(test)


def _ring(n: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    t = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.column_stack([np.cos(t), np.sin(t)])
    return pts + noise * rng.standard_normal((n, 2)) if noise > 0 else pts


def _two_moons(n: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    n_upper = n // 2
    t_up = rng.uniform(0.0, np.pi, size=n_upper)
    t_lo = rng.uniform(0.0, np.pi, size=n - n_upper)
    upper = np.column_stack([np.cos(t_up), np.sin(t_up)])
    lower = np.column_stack([1.0 - np.cos(t_lo), 0.5 - np.sin(t_lo)])
    # centred on the origin so the same outlier box fits every generator
    pts = np.vstack([upper, lower]) - np.array([0.5, 0.25])
    return pts + noise * rng.standard_normal((n, 2)) if noise > 0 else pts


_BLOB_CENTERS = np.array([[-1.0, -0.6], [1.0, -0.6], [0.0, 1.0]])


def _blobs(n: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    which = rng.integers(0, len(_BLOB_CENTERS), size=n)
    return _BLOB_CENTERS[which] + max(noise, 0.0) * rng.standard_normal((n, 2))


def _uniform_outliers(m: int, rng: np.random.Generator, box: float, min_radius: float) -> np.ndarray:
    out = np.empty((0, 2))
    while len(out) < m:
        cand = rng.uniform(-box, box, size=(2 * (m - len(out)) + 8, 2))
        cand = cand[np.hypot(cand[:, 0], cand[:, 1]) >= min_radius]
        out = np.vstack([out, cand])
    return out[:m]


def make_synthetic(kind: str, n: int, noise: float = 0.05, seed: int = 0, outlier_rate: float = 0.0,
                   outlier_box: float = 2.0, outlier_min_radius: float = 0.0) -> Dataset:
    """2-D toy data; with ``outlier_rate > 0`` that fraction of the ``n`` rows are
    planted outliers, uniform on ``[-outlier_box, outlier_box]^2`` minus the disc of
    radius ``outlier_min_radius``, and labels are attached.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ContractError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if n < 10:
        raise ContractError(f"synthetic datasets need n >= 10, got {n}")
    if not 0.0 <= outlier_rate < 1.0:
        raise ContractError(f"outlier_rate must lie in [0, 1), got {outlier_rate}")
    if outlier_min_radius >= outlier_box * math.sqrt(2.0):
        raise ContractError("outlier_min_radius leaves no room inside the outlier box")
    rng = np.random.default_rng(seed)
    n_out = int(round(outlier_rate * n))
    gen = {"ring": _ring, "two-moons": _two_moons, "gaussian-blobs": _blobs}[kind]
    inliers = gen(n - n_out, noise, rng)
    names = ["x", "y"]
    if n_out == 0:
        return Dataset(inliers, None, names)
    outliers = _uniform_outliers(n_out, rng, outlier_box, outlier_min_radius)
    x = np.vstack([inliers, outliers])
    y = np.concatenate([np.zeros(len(inliers), dtype=np.int64), np.ones(n_out, dtype=np.int64)])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], names)
