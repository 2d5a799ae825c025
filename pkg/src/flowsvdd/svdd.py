"""Hypersphere objective on volume-normalized flow embeddings.

The flow output is divided by ``w ** (1/D)`` (``w`` the constant Jacobian
determinant), which makes the map from input space to the embedding space
exactly volume preserving.  The sphere is then fitted in that space, so its
volume equals the volume of the induced input-space region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .flow import FlowModel
from .tensor import Tensor

SCORE_CHUNK_ROWS = 8192


@dataclass
class SvddHead:
    center: np.ndarray
    radius_sq: float
    nu: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.radius_sq = float(self.radius_sq)
        self.nu = float(self.nu)
        if self.radius_sq < 0:
            raise ContractError(f"radius_sq must be >= 0, got {self.radius_sq}")
        if not 0.0 < self.nu <= 1.0:
            raise ContractError(f"nu must lie in (0, 1], got {self.nu}")

    @property
    def radius(self) -> float:
        return math.sqrt(self.radius_sq)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "radius_sq": self.radius_sq, "nu": self.nu}

    @classmethod
    def from_dict(cls, doc: dict) -> "SvddHead":
        return cls(np.asarray(doc["center"], dtype=np.float64), doc["radius_sq"], doc["nu"])


@dataclass
class ScoreVector:
    distances: np.ndarray
    outlier: np.ndarray
    radius: float

    def __len__(self) -> int:
        return len(self.distances)


def normalized_embed(x, model: FlowModel) -> Tensor:
    """f(x) * exp(-log(w) / D); differentiable through both f and the log-scales."""
    f = model.forward(x)
    factor = T.exp(T.mul(model.scaling.log_det(), -1.0 / model.dim))
    return T.mul(f, factor)


def embed(x, model: FlowModel) -> np.ndarray:
    """Untracked ``normalized_embed`` for arrays, evaluated in row chunks."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise DimensionError(f"expected a batch with {model.dim} columns, got shape {x.shape}")
    parts = [normalized_embed(x[i : i + SCORE_CHUNK_ROWS], model).data
             for i in range(0, len(x), SCORE_CHUNK_ROWS)]
    return np.concatenate(parts, axis=0) if parts else np.empty((0, model.dim))


def svdd_loss(z, head: SvddHead, center: Tensor | None = None) -> Tensor:
    """R^2 + 1/(nu n) * sum_i max(0, |z_i - c|^2 - R^2).

    ``R^2`` is a constant here.  Pass ``center`` as a tracked tensor to
    differentiate with respect to it; otherwise ``head.center`` is used.
    """
    z = T.as_tensor(z)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ContractError(f"svdd_loss needs a nonempty (n, D) batch, got shape {z.shape}")
    c = center if center is not None else Tensor(head.center)
    n = z.shape[0]
    sq = T.sq_norm_rows(T.sub(z, c))
    violations = T.relu(T.sub(sq, head.radius_sq))
    return T.add(head.radius_sq, T.mul(T.sum(violations), 1.0 / (head.nu * n)))


def allowed_violations(n: int, nu: float) -> int:
    # floor(nu * n) with slack for products like 0.05 * 100 = 5.000000000000001
    return int(math.floor(nu * n + 1e-9))


def optimal_radius_sq(sq_distances, nu: float) -> float:
    """Smallest R^2 minimizing the soft-margin objective for fixed distances.

    This is the k-th smallest squared distance with k = ceil((1 - nu) n),
    clamped to [1, n].
    """
    d = np.asarray(sq_distances, dtype=np.float64).ravel()
    n = d.size
    if n == 0:
        raise ContractError("optimal_radius_sq of an empty distance vector")
    if not 0.0 < nu <= 1.0:
        raise ContractError(f"nu must lie in (0, 1], got {nu}")
    k = min(max(n - allowed_violations(n, nu), 1), n)
    return float(np.sort(d, kind="stable")[k - 1])


def violation_fraction(sq_distances, radius_sq: float) -> float:
    d = np.asarray(sq_distances, dtype=np.float64)
    return float(np.mean(d > radius_sq))


def init_center(z) -> np.ndarray:
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ContractError(f"init_center needs a nonempty (n, D) batch, got shape {z.shape}")
    return z.mean(axis=0)


def score(x, model: FlowModel, head: SvddHead) -> ScoreVector:
    z = embed(x, model)
    if z.shape[1] != head.center.shape[0]:
        raise DimensionError(f"head center has {head.center.shape[0]} dims, model has {z.shape[1]}")
    d = np.sqrt(np.einsum("ij,ij->i", z - head.center, z - head.center))
    return ScoreVector(d, d > head.radius, head.radius)


def score_unnormalized(x, model: FlowModel, head: SvddHead) -> ScoreVector:
    """Same decision in raw flow coordinates: |f(x) - w^(1/D) c| > R w^(1/D).

    Distances are reported in raw flow units.
    """
    x = np.asarray(x, dtype=np.float64)
    flow_out = np.concatenate(
        [model.forward(x[i : i + SCORE_CHUNK_ROWS]).data for i in range(0, len(x), SCORE_CHUNK_ROWS)],
        axis=0,
    )
    scale = math.exp(model.log_jacobian() / model.dim)
    diff = flow_out - scale * head.center
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return ScoreVector(d, d > head.radius * scale, head.radius * scale)
