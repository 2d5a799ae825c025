"""Plain-text ``key = value`` manifests and the data preparation they describe.

Relative paths inside a manifest are resolved against the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (CsvSchema, Dataset, SplitSpec, load_csv, load_mat, make_synthetic, one_vs_rest,
                   split_indices, standardize)
from .errors import ContractError, DataError

MANIFEST_FORMAT_VERSION = 1


def parse_manifest_text(text: str, origin: str = "<manifest>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def read_manifest(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    values = parse_manifest_text(path.read_text(), str(path))
    version = values.get("format_version", str(MANIFEST_FORMAT_VERSION))
    if version != str(MANIFEST_FORMAT_VERSION):
        raise ContractError(f"{path}: unsupported manifest format_version {version}")
    return values


def write_manifest(values: dict, path: str | Path) -> None:
    lines = [f"format_version = {MANIFEST_FORMAT_VERSION}"]
    lines += [f"{k} = {v}" for k, v in values.items() if k != "format_version"]
    Path(path).write_text("\n".join(lines) + "\n")


def _list(value: str | None) -> list[str]:
    if value is None or not value.strip():
        return []
    return [v.strip() for v in value.split(",")]


def _bool(value: str | None, default: bool) -> bool:
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


def _opt_int(value: str | None) -> int | None:
    return None if value is None or value.strip().lower() in ("", "none") else int(value)


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_of(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class PreparedData:
    """All rows (standardized with training statistics) plus the split."""

    full: Dataset
    train_rows: np.ndarray
    test_rows: np.ndarray
    manifest: dict[str, str]
    data_sha256: str

    @property
    def train(self) -> Dataset:
        return self.full.subset(self.train_rows)

    @property
    def test(self) -> Dataset:
        return self.full.subset(self.test_rows)

    def part(self, name: str) -> Dataset:
        if name == "train":
            return self.train
        if name == "test":
            return self.test
        if name == "all":
            return self.full
        raise ContractError(f"unknown split part {name!r}; expected train, test or all")

    @property
    def digest(self) -> str:
        return digest_of(self.manifest, self.data_sha256)


def _load_source(path: Path, fmt: str, m: dict[str, str]) -> Dataset:
    if fmt == "mat":
        return load_mat(path, m.get("x_key", "X"), m.get("y_key", "y"))
    if fmt == "csv":
        schema = CsvSchema(
            label_column=m.get("label_column") or None,
            categorical=_list(m.get("categorical")),
            header=_bool(m.get("header"), True),
            column_names=_list(m.get("column_names")) or None,
            anomaly_labels=_list(m.get("anomaly_labels")) or None,
            nominal_labels=_list(m.get("nominal_labels")) or None,
            drop=_list(m.get("drop")),
            delimiter=m.get("delimiter", ","),
        )
        return load_csv(path, schema)
    raise ContractError(f"unknown data format {fmt!r}")


def _concat(a: Dataset, b: Dataset) -> Dataset:
    if a.feature_names != b.feature_names:
        raise DataError("train and test files have different columns")
    labels = None if a.labels is None or b.labels is None else np.concatenate([a.labels, b.labels])
    classes = None if a.classes is None or b.classes is None else np.concatenate([a.classes, b.classes])
    return Dataset(np.vstack([a.features, b.features]), labels, a.feature_names, classes=classes,
                   rejected_rows=a.rejected_rows + b.rejected_rows)


def prepare(manifest_path: str | Path) -> PreparedData:
    """Load, split and standardize the dataset a manifest describes."""
    manifest_path = Path(manifest_path)
    m = read_manifest(manifest_path)
    base = manifest_path.parent
    seed = int(m.get("seed", "0"))
    source = m.get("source")
    if not source:
        raise ContractError(f"{manifest_path}: missing 'source'")

    provided = None
    if source == "synthetic":
        data = make_synthetic(
            m.get("kind", "ring"), int(m.get("n", "1000")), float(m.get("noise", "0.05")), seed,
            float(m.get("outlier_rate", "0")), float(m.get("outlier_box", "2")),
            float(m.get("outlier_min_radius", "0")),
        )
        data_hash = "synthetic"
    else:
        path = (base / source).resolve()
        if not path.exists():
            raise DataError(f"data file not found: {path}")
        fmt = m.get("format") or ("mat" if path.suffix == ".mat" else "csv")
        data = _load_source(path, fmt, m)
        data_hash = file_sha256(path)
        if m.get("test_source"):
            tpath = (base / m["test_source"]).resolve()
            if not tpath.exists():
                raise DataError(f"data file not found: {tpath}")
            test = _load_source(tpath, fmt, m)
            provided = np.r_[np.ones(data.n, dtype=bool), np.zeros(test.n, dtype=bool)]
            data = _concat(data, test)
            data_hash += ":" + file_sha256(tpath)

    spec = SplitSpec(
        mode=m.get("split_mode", "nominal-half" if data.labels is not None else "none"),
        seed=seed,
        train_fraction=float(m.get("train_fraction", "0.5")),
        nominal_class=m.get("nominal_class") or None,
        train_subsample=_opt_int(m.get("train_subsample")),
    )
    if spec.mode == "one-vs-rest":
        data = one_vs_rest(data, spec.nominal_class)
    train_rows, test_rows = split_indices(data, spec, provided)
    test_sub = _opt_int(m.get("test_subsample"))
    if test_sub is not None and test_rows.size > test_sub:
        rng = np.random.default_rng(seed + 1)
        test_rows = np.sort(rng.choice(test_rows, size=test_sub, replace=False))
    if _bool(m.get("standardize"), True):
        data = standardize(data, train_rows)
    return PreparedData(data, train_rows, test_rows, m, data_hash)
