"""Seeded mini-batch training of the flow, center and radius."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .flow import FlowConfig, FlowModel
from .svdd import SvddHead, embed, init_center, normalized_embed, optimal_radius_sq, svdd_loss
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "mean_loss", "radius_sq", "violation_fraction", "log_w")


@dataclass
class TrainConfig:
    nu: float = 0.05
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    radius_update_period: int = 1
    scaling_enabled: bool = True
    grad_clip: float | None = 10.0
    n_couplings: int = 4
    hidden_layers: int = 4
    hidden_dim: int = 256

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ContractError(f"nu must lie in (0, 1], got {self.nu}")
        if self.epochs < 1 or self.batch_size < 1 or self.radius_update_period < 1:
            raise ContractError("epochs, batch_size and radius_update_period must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            self.grad_clip = None

    @property
    def flow_config(self) -> FlowConfig:
        return FlowConfig(self.n_couplings, self.hidden_layers, self.hidden_dim, "relu", self.scaling_enabled)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from a mapping of (possibly string) values; unknown keys are ignored."""
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            kwargs[f.name] = _coerce(raw, f.default)
        return cls(**kwargs)


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"cannot read {raw!r} as a boolean")
    if text.lower() in ("none", "off", ""):
        return None
    if isinstance(default, int):
        return int(text)
    return float(text)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state differ in length")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"parameter shape {p.shape} vs gradient {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    radius_sq: float
    violation_fraction: float
    log_w: float


@dataclass
class TrainState:
    model: FlowModel
    head: SvddHead
    center: Tensor
    adam: AdamState
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def params(self) -> list[Tensor]:
        return self.model.parameters() + [self.center]


@dataclass
class FitResult:
    model: FlowModel
    head: SvddHead
    history: list[EpochRecord]
    step_losses: list[float]


def _features(data) -> np.ndarray:
    x = getattr(data, "features", data)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"training data must be a 2-D matrix, got shape {x.shape}")
    return x


def _refit_radius(state: TrainState, x: np.ndarray) -> np.ndarray:
    z = embed(x, state.model)
    sq = np.einsum("ij,ij->i", z - state.head.center, z - state.head.center)
    state.head.radius_sq = optimal_radius_sq(sq, state.head.nu)
    return sq


def init_state(x: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> TrainState:
    model = FlowModel.create(x.shape[1], rng, cfg.flow_config, identity=True)
    center = init_center(embed(x, model))
    state = TrainState(model, SvddHead(center, 0.0, cfg.nu), Tensor(center.copy(), requires_grad=True),
                       AdamState.zeros_like([]))
    state.adam = AdamState.zeros_like([p.data for p in state.params])
    _refit_radius(state, x)
    return state


def train_step(state: TrainState, batch: np.ndarray, cfg: TrainConfig) -> float:
    params = state.params
    try:
        with Tape() as tape:
            loss = svdd_loss(normalized_embed(batch, state.model), state.head, center=state.center)
            tape.backward(loss, params)
    except NumericError as exc:
        raise NumericError(
            f"non-finite value at step {len(state.loss_history) + 1} ({exc}); "
            f"lower learning_rate (currently {cfg.learning_rate:g}) or enable grad_clip"
        ) from exc
    grads = [p.grad for p in params]
    if cfg.grad_clip is not None:
        clip_global_norm(grads, cfg.grad_clip)
    adam_step([p.data for p in params], grads, state.adam, cfg.learning_rate,
              cfg.beta1, cfg.beta2, cfg.adam_epsilon)
    state.head.center = state.center.data.copy()
    value = loss.item()
    state.loss_history.append(value)
    return value


def fit(data, cfg: TrainConfig | None = None) -> FitResult:
    """Train on the rows of ``data`` (a Dataset or an (n, D) array)."""
    cfg = cfg or TrainConfig()
    x = _features(data)
    n = x.shape[0]
    if n < 1:
        raise ContractError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    state = init_state(x, cfg, rng)
    batch_size = min(cfg.batch_size, n)

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        losses = [train_step(state, x[perm[i : i + batch_size]], cfg) for i in range(0, n, batch_size)]
        if epoch % cfg.radius_update_period == 0 or epoch == cfg.epochs:
            sq = _refit_radius(state, x)
        else:
            z = embed(x, state.model)
            sq = np.einsum("ij,ij->i", z - state.head.center, z - state.head.center)
        state.epoch = epoch
        record = EpochRecord(epoch, float(np.mean(losses)), state.head.radius_sq,
                             float(np.mean(sq > state.head.radius_sq)), state.model.log_jacobian())
        state.epochs.append(record)
        log.debug("epoch %d loss %.6g R2 %.6g viol %.4f", epoch, record.mean_loss,
                  record.radius_sq, record.violation_fraction)

    return FitResult(state.model, state.head, state.epochs, state.loss_history)


def write_history_csv(history: list[EpochRecord], path: str | Path, comment: str | None = None) -> None:
    """One row per epoch; ``comment`` becomes a leading ``#`` line."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for r in history:
            writer.writerow([r.epoch, repr(r.mean_loss), repr(r.radius_sq),
                             repr(r.violation_fraction), repr(r.log_w)])


def read_history_csv(path: str | Path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return [EpochRecord(int(r["epoch"]), float(r["mean_loss"]), float(r["radius_sq"]),
                        float(r["violation_fraction"]), float(r["log_w"])) for r in rows]
