"""NICE-style additive coupling flow with a trailing diagonal scaling layer.

Every coupling layer has a unit-triangular Jacobian, so the only volume change
comes from the scaling layer and ``log |det df| = sum(log_scales)`` for every
input point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

FORMAT_VERSION = 1


@dataclass(frozen=True)
class FlowConfig:
    n_couplings: int = 4
    hidden_layers: int = 4
    hidden_dim: int = 256
    activation: str = "relu"
    scaling_enabled: bool = True


def coupling_masks(dim: int, n_couplings: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(passive, active) index pairs alternating low-half / high-half.

    Odd layers hold the low ``ceil(D/2)`` coordinates fixed; even layers hold
    the complement fixed, so every coordinate is updated by half the layers.
    """
    if dim < 2:
        raise DimensionError(f"coupling flows need D >= 2, got {dim}")
    low = np.arange(math.ceil(dim / 2))
    high = np.arange(math.ceil(dim / 2), dim)
    return [(low, high) if i % 2 == 0 else (high, low) for i in range(n_couplings)]


@dataclass
class MLP:
    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "relu"

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator, zero_output: bool = True,
             activation: str = "relu") -> "MLP":
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_output:
                w = np.zeros((fan_in, fan_out))
            elif last:
                bound = 1.0 / math.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            else:
                bound = math.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            weights.append(Tensor(w, requires_grad=True))
            biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
        return cls(weights, biases, activation)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.add(T.matmul(h, w), b)
            if i < last:
                h = T.activation(h, self.activation)
        return h

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class CouplingLayer:
    """y_A = x_A, y_B = x_B + m(x_A)."""

    passive: np.ndarray
    active: np.ndarray
    conditioner: MLP

    @property
    def dim(self) -> int:
        return len(self.passive) + len(self.active)

    def forward(self, x: Tensor) -> Tensor:
        xa = T.take_cols(x, self.passive)
        yb = T.add(T.take_cols(x, self.active), self.conditioner(xa))
        return T.combine_cols([xa, yb], [self.passive, self.active], self.dim)

    def inverse(self, y: Tensor) -> Tensor:
        ya = T.take_cols(y, self.passive)
        xb = T.sub(T.take_cols(y, self.active), self.conditioner(ya))
        return T.combine_cols([ya, xb], [self.passive, self.active], self.dim)


@dataclass
class ScalingLayer:
    log_scales: Tensor

    def forward(self, x: Tensor) -> Tensor:
        return T.mul(x, T.exp(self.log_scales))

    def inverse(self, z: Tensor) -> Tensor:
        return T.mul(z, T.exp(T.mul(self.log_scales, -1.0)))

    def log_det(self) -> Tensor:
        return T.sum(self.log_scales)


@dataclass
class FlowModel:
    dim: int
    couplings: list[CouplingLayer]
    scaling: ScalingLayer
    config: FlowConfig = field(default_factory=FlowConfig)

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, config: FlowConfig | None = None,
               identity: bool = True) -> "FlowModel":
        """Build a flow; ``identity=True`` zeroes conditioner outputs and log-scales.

        With ``identity=False`` the output layers and log-scales are random too,
        which is only useful for exercising invertibility and Jacobian checks.
        """
        config = config or FlowConfig()
        couplings = []
        for passive, active in coupling_masks(dim, config.n_couplings):
            sizes = [len(passive)] + [config.hidden_dim] * config.hidden_layers + [len(active)]
            mlp = MLP.init(sizes, rng, zero_output=identity, activation=config.activation)
            couplings.append(CouplingLayer(passive, active, mlp))
        if identity or not config.scaling_enabled:
            s = np.zeros(dim)
        else:
            s = rng.normal(0.0, 0.3, size=dim)
        scaling = ScalingLayer(Tensor(s, requires_grad=config.scaling_enabled))
        return cls(dim, couplings, scaling, config)

    def parameters(self) -> list[Tensor]:
        params = [p for c in self.couplings for p in c.conditioner.parameters()]
        if self.config.scaling_enabled:
            params.append(self.scaling.log_scales)
        return params

    def _check(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"expected a batch with {self.dim} columns, got shape {x.shape}")
        return x

    def forward(self, x) -> Tensor:
        h = self._check(x)
        for layer in self.couplings:
            h = layer.forward(h)
        return self.scaling.forward(h)

    def inverse(self, z) -> Tensor:
        h = self.scaling.inverse(self._check(z))
        for layer in reversed(self.couplings):
            h = layer.inverse(h)
        return h

    def log_jacobian(self) -> float:
        """log w, the same for every input point."""
        return float(self.scaling.log_scales.data.sum())

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "D": self.dim,
            "config": {
                "n_couplings": self.config.n_couplings,
                "hidden_layers": self.config.hidden_layers,
                "hidden_dim": self.config.hidden_dim,
                "activation": self.config.activation,
                "scaling_enabled": self.config.scaling_enabled,
            },
            "masks": [{"passive": c.passive.tolist(), "active": c.active.tolist()} for c in self.couplings],
            "layers": [
                {
                    "weights": [w.data.tolist() for w in c.conditioner.weights],
                    "biases": [b.data.tolist() for b in c.conditioner.biases],
                }
                for c in self.couplings
            ],
            "log_scales": self.scaling.log_scales.data.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FlowModel":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ContractError(f"unsupported flow format_version {doc.get('format_version')!r}")
        config = FlowConfig(**doc["config"])
        couplings = []
        for mask, layer in zip(doc["masks"], doc["layers"]):
            mlp = MLP(
                [Tensor(w, requires_grad=True) for w in layer["weights"]],
                [Tensor(b, requires_grad=True) for b in layer["biases"]],
                config.activation,
            )
            couplings.append(CouplingLayer(np.asarray(mask["passive"], dtype=np.intp),
                                           np.asarray(mask["active"], dtype=np.intp), mlp))
        scaling = ScalingLayer(Tensor(doc["log_scales"], requires_grad=config.scaling_enabled))
        return cls(int(doc["D"]), couplings, scaling, config)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = arr.ndim == 1
    return (arr[None, :] if single else arr), single


def coupling_forward(x, layer: CouplingLayer) -> np.ndarray:
    batch, single = _as_batch(x)
    out = layer.forward(Tensor(batch)).data
    return out[0] if single else out


def coupling_inverse(y, layer: CouplingLayer) -> np.ndarray:
    batch, single = _as_batch(y)
    out = layer.inverse(Tensor(batch)).data
    return out[0] if single else out


def scaling_forward(x, s) -> tuple[np.ndarray, float]:
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    return x * np.exp(s), float(s.sum())


def flow_forward(x, model: FlowModel) -> np.ndarray:
    return model.forward(x).data


def flow_inverse(z, model: FlowModel) -> np.ndarray:
    return model.inverse(z).data


def log_jacobian(model: FlowModel) -> float:
    return model.log_jacobian()


def save_flow(model: FlowModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_flow(path: str | Path) -> FlowModel:
    return FlowModel.from_dict(json.loads(Path(path).read_text()))
