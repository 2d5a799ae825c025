"""Ranking metrics, rank extremes, boundary grids and the evaluation report."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError
from .flow import FlowModel
from .svdd import SvddHead, embed, score

REPORT_FORMAT_VERSION = 1
F1_RULE = "top ceil(ratio*m) scores flagged, ratio = test anomaly fraction, ties by index"


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be binary")
    return y.astype(np.int64)


def auc(scores, labels) -> float:
    """P(anomaly score > nominal score) + 0.5 P(tie), via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if s.shape != y.shape:
        raise ContractError(f"scores {s.shape} and labels {y.shape} differ in shape")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("auc needs both anomalies and nominal examples")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_at_ratio(scores, labels, ratio: float) -> tuple[float, float]:
    """F1 with the top ``ceil(ratio * m)`` scores flagged anomalous.

    Returns ``(f1, threshold)`` where threshold is the lowest flagged score.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"anomaly ratio must lie in (0, 1), got {ratio}")
    if y.sum() == 0 or y.sum() == y.size:
        raise ContractError("f1_at_ratio needs both anomalies and nominal examples")
    m = s.size
    k = min(max(math.ceil(ratio * m - 1e-9), 1), m)
    order = np.argsort(-s, kind="stable")
    flagged = np.zeros(m, dtype=bool)
    flagged[order[:k]] = True
    tp = int(np.sum(flagged & (y == 1)))
    if tp == 0:
        return 0.0, float(s[order[k - 1]])
    precision = tp / k
    recall = tp / int(y.sum())
    return 2 * precision * recall / (precision + recall), float(s[order[k - 1]])


def rank_extremes(scores, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k`` smallest and ``k`` largest scores (ties by index)."""
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= k <= s.size:
        raise ContractError(f"k={k} outside [0, {s.size}]")
    best = np.argsort(s, kind="stable")[:k]
    worst = np.argsort(-s, kind="stable")[:k]
    return best, worst


@dataclass
class BoundaryGrid:
    x: np.ndarray
    y: np.ndarray
    distance: np.ndarray
    inlier: np.ndarray
    latent: np.ndarray
    train_latent: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.size


def boundary_grid(model: FlowModel, head: SvddHead, bounds, resolution: int,
                  train_x=None, workers: int = 1) -> BoundaryGrid:
    """Score a ``resolution x resolution`` grid over ``(xmin, xmax, ymin, ymax)``.

    Also returns latent positions of the grid (and of ``train_x``) so both the
    input-space region and the latent sphere can be drawn.
    """
    if model.dim != 2:
        raise ContractError(f"boundary grids need a 2-D model, got D={model.dim}")
    if resolution < 1:
        raise ContractError("resolution must be >= 1")
    xmin, xmax, ymin, ymax = map(float, bounds)
    gx, gy = np.meshgrid(np.linspace(xmin, xmax, resolution), np.linspace(ymin, ymax, resolution))
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    rows = np.array_split(np.arange(len(pts)), max(1, resolution))

    def run(idx):
        return score(pts[idx], model, head).distances, embed(pts[idx], model)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, rows))
    else:
        parts = [run(idx) for idx in rows]
    dist = np.concatenate([p[0] for p in parts])
    latent = np.concatenate([p[1] for p in parts])
    train_latent = embed(np.asarray(train_x, dtype=np.float64), model) if train_x is not None else None
    return BoundaryGrid(pts[:, 0], pts[:, 1], dist, dist <= head.radius, latent, train_latent)


def write_grid_csv(grid: BoundaryGrid, path: str | Path, digest: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# flowsvdd grid format_version={REPORT_FORMAT_VERSION} digest={digest}\n")
        w = csv.writer(fh)
        w.writerow(["x", "y", "distance", "inlier", "latent_x", "latent_y"])
        for i in range(len(grid)):
            w.writerow([repr(float(grid.x[i])), repr(float(grid.y[i])), repr(float(grid.distance[i])),
                        int(grid.inlier[i]), repr(float(grid.latent[i, 0])), repr(float(grid.latent[i, 1]))])


def write_latent_csv(points: np.ndarray, latent: np.ndarray, path: str | Path, digest: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# flowsvdd latent format_version={REPORT_FORMAT_VERSION} digest={digest}\n")
        w = csv.writer(fh)
        w.writerow(["x", "y", "latent_x", "latent_y"])
        for p, z in zip(points, latent):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(z[0])), repr(float(z[1]))])


@dataclass
class EvalReport:
    n: int
    radius: float
    violation_fraction: float
    scores: list[float]
    labels: list[int] | None
    auc: float | None = None
    f1: float | None = None
    threshold: float | None = None
    anomaly_ratio: float | None = None
    threshold_rule: str = F1_RULE
    best_k: list[int] = field(default_factory=list)
    worst_k: list[int] = field(default_factory=list)
    row_ids: list[int] = field(default_factory=list)
    digest: str = ""
    seed: int | None = None
    config: dict = field(default_factory=dict)
    format_version: int = REPORT_FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate(model: FlowModel, head: SvddHead, features, labels=None, k: int = 10,
             row_ids=None, digest: str = "", seed: int | None = None, config: dict | None = None) -> EvalReport:
    sv = score(features, model, head)
    d = sv.distances
    k = min(k, d.size)
    best, worst = rank_extremes(d, k)
    report = EvalReport(
        n=int(d.size),
        radius=head.radius,
        violation_fraction=float(np.mean(sv.outlier)) if d.size else 0.0,
        scores=d.tolist(),
        labels=None if labels is None else np.asarray(labels).astype(int).tolist(),
        best_k=best.tolist(),
        worst_k=worst.tolist(),
        row_ids=(np.arange(d.size) if row_ids is None else np.asarray(row_ids)).astype(int).tolist(),
        digest=digest,
        seed=seed,
        config=config or {},
    )
    if labels is not None:
        y = _binary(labels)
        if 0 < y.sum() < y.size:
            report.anomaly_ratio = float(y.mean())
            report.auc = auc(d, y)
            report.f1, report.threshold = f1_at_ratio(d, y, report.anomaly_ratio)
    return report
