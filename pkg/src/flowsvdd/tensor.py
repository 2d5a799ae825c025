"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, so the tape is always topologically sorted.  ``Tape.backward``
walks it once in reverse and writes ``.grad`` on every leaf that requires
gradients.  Without an active tape the same functions are plain numpy
arithmetic, which is what the scoring paths use.

Broadcasting is limited to the bias-add pattern: one operand's shape must be
a trailing suffix of the other's (``(D,)`` against ``(n, D)``, or a scalar).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "elementwise",
    "relu",
    "tanh",
    "exp",
    "activation",
    "sum",
    "mean",
    "max",
    "sq_norm_rows",
    "reduce",
    "take_cols",
    "combine_cols",
    "backward",
]

_node_ids = itertools.count()
_active_tapes: list["Tape"] = []

# gemm is always called on blocks of exactly this many rows; OpenBLAS picks
# kernels by row count, and a fixed count keeps each output row independent of
# the batch it was computed in.
GEMM_BLOCK_ROWS = 64


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} produced non-finite values")
    return arr


class Tensor:
    """A float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = _check_finite(arr, name or "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output_id: int
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Populate ``.grad`` of every tracked leaf from scalar ``loss``.

        Leaves in ``params`` (and any tracked leaf read by the tape) that do
        not influence ``loss`` get an all-zero gradient.
        """
        if loss.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {rec.output_id for rec in self.records}
        leaves: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and t.node_id not in produced:
                    leaves[t.node_id] = t
        for p in params:
            leaves[p.node_id] = p

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.output_id, None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.node_id in grads:
                    grads[t.node_id] = grads[t.node_id] + gi
                else:
                    grads[t.node_id] = gi

        for nid, leaf in leaves.items():
            g = grads.get(nid)
            leaf.grad = _check_finite(g, "backward") if g is not None else np.zeros_like(leaf.data)


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    tape.backward(loss, params)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = _check_finite(out, op)
    result.grad = None
    result.node_id = next(_node_ids)
    result.name = None
    tracked = bool(_active_tapes) and any(t.requires_grad for t in inputs)
    result.requires_grad = tracked
    if tracked:
        _active_tapes[-1].records.append(Record(op, inputs, result.node_id, backward_fn))
    return result


def _blocked_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    pad = (-n) % GEMM_BLOCK_ROWS
    if pad:
        a = np.concatenate([a, np.zeros((pad, a.shape[1]))], axis=0)
    out = np.empty((a.shape[0], b.shape[1]))
    for i in range(0, a.shape[0], GEMM_BLOCK_ROWS):
        np.matmul(a[i : i + GEMM_BLOCK_ROWS], b, out=out[i : i + GEMM_BLOCK_ROWS])
    return out[:n]


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def grad_fn(g):
        return (
            _blocked_matmul(g, B.T) if a.requires_grad else None,
            A.T @ g if b.requires_grad else None,
        )

    return _emit("matmul", _blocked_matmul(A, B), (a, b), grad_fn)


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    return len(short) < len(long_) and long_[len(long_) - len(short) :] == short


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def elementwise(a, b, op: str) -> Tensor:
    """Apply ``op`` in {add, sub, mul, div} with leading-axis broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    A, B = a.data, b.data
    sa, sb = a.shape, b.shape
    if op == "add":
        out = A + B

        def grad_fn(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

    elif op == "sub":
        out = A - B

        def grad_fn(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    elif op == "mul":
        out = A * B

        def grad_fn(g):
            return _unbroadcast(g * B, sa), _unbroadcast(g * A, sb)

    elif op == "div":
        if np.any(B == 0):
            raise NumericError("division by zero")
        out = A / B

        def grad_fn(g):
            return _unbroadcast(g / B, sa), _unbroadcast(-g * A / (B * B), sb)

    else:
        raise ContractError(f"unknown elementwise op {op!r}")
    return _emit(op, out, (a, b), grad_fn)


def add(a, b) -> Tensor:
    return elementwise(a, b, "add")


def sub(a, b) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a, b) -> Tensor:
    return elementwise(a, b, "mul")


def div(a, b) -> Tensor:
    return elementwise(a, b, "div")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def activation(a, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "tanh":
        return tanh(a)
    raise ContractError(f"unknown activation {kind!r}")


def _nonempty(a: Tensor, op: str) -> None:
    if a.size == 0:
        raise DimensionError(f"{op} of an empty tensor")


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    _nonempty(a, "sum")
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    _nonempty(a, "mean")
    shape, n = a.shape, a.size
    return _emit("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def max(a) -> Tensor:  # noqa: A001
    """Global maximum; the gradient goes to the first attaining index."""
    a = as_tensor(a)
    _nonempty(a, "max")
    flat = int(np.argmax(a.data))
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out.flat[flat] = float(g)
        return (out,)

    return _emit("max", np.asarray(a.data.flat[flat]), (a,), grad_fn)


def sq_norm_rows(a) -> Tensor:
    """Squared Euclidean norm of each row; a 1-D input is one row (scalar out)."""
    a = as_tensor(a)
    _nonempty(a, "sq_norm_rows")
    A = a.data
    if a.ndim == 1:
        return _emit("sq_norm_rows", np.asarray(A @ A), (a,), lambda g: (2.0 * float(g) * A,))
    if a.ndim != 2:
        raise DimensionError(f"sq_norm_rows expects 1-D or 2-D input, got {a.shape}")
    out = np.einsum("ij,ij->i", A, A)
    return _emit("sq_norm_rows", out, (a,), lambda g: (2.0 * A * g[:, None],))


def reduce(a, kind: str) -> Tensor:
    fns = {"sum": sum, "mean": mean, "max": max, "sq_norm_rows": sq_norm_rows}
    if kind not in fns:
        raise ContractError(f"unknown reduction {kind!r}")
    return fns[kind](a)


def take_cols(a, idx: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"take_cols expects a 2-D tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out[:, idx] = g
        return (out,)

    return _emit("take_cols", a.data[:, idx], (a,), grad_fn)


def combine_cols(parts: Sequence[Tensor], index_sets: Sequence[Sequence[int]], width: int) -> Tensor:
    """Inverse of ``take_cols``: scatter column blocks into a ``width``-wide matrix.

    ``index_sets`` must partition ``range(width)``.
    """
    parts = tuple(as_tensor(p) for p in parts)
    sets = [np.asarray(s, dtype=np.intp) for s in index_sets]
    covered = np.sort(np.concatenate(sets))
    if not np.array_equal(covered, np.arange(width)):
        raise DimensionError("combine_cols index sets must partition the columns")
    n = parts[0].shape[0]
    out = np.empty((n, width))
    for p, s in zip(parts, sets):
        if p.shape != (n, len(s)):
            raise DimensionError(f"combine_cols part shape {p.shape} != {(n, len(s))}")
        out[:, s] = p.data
    return _emit("combine_cols", out, parts, lambda g: tuple(g[:, s] for s in sets))
