"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds its output through :meth:`Tensor._make`, which records the
parent tensors and a closure that maps the output gradient onto the parents.
``Tensor.backward`` walks that DAG in reverse topological order exactly once
per node.  Broadcasting is limited to python scalars / size-1 tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)  # always a private copy
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        out.grad = None
        out.name = None
        out._op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` of every upstream tensor that requires it.

        Gradients add onto whatever is already stored, so callers zero them
        between optimisation steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=DTYPE).reshape(shape)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * x.data * g,)

    return Tensor._make(x.data * x.data, (x,), backward, "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._make(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._make(out, (x,), backward, "sigmoid")


def log1p(x: Tensor) -> Tensor:
    if np.any(x.data <= -1.0):
        raise ValueError("log1p: argument must be > -1")

    def backward(g):
        return (g / (1.0 + x.data),)

    return Tensor._make(np.log1p(x.data), (x,), backward, "log1p")


# ----------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes)

    def backward(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes), 1.0 / count)


# ---------------------------------------------------------------- structural
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._make(out, (x,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return Tensor._make(out, tensors, backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------- gradient checking
@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


@dataclass
class GradCheckReport:
    label: str
    tol: float
    results: list[GradCheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed(self.tol) for r in self.results)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    def failures(self) -> list[GradCheckResult]:
        return [r for r in self.results if not r.passed(self.tol)]

    def __str__(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return f"{state} {self.label}: max rel err {self.max_rel_error:.2e} over {len(self.results)} tensors"


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, index, eps: float) -> float:
    old = t.data[index]
    t.data[index] = old + eps
    fp = fn().data.sum()
    t.data[index] = old - eps
    fm = fn().data.sum()
    t.data[index] = old
    return (fp - fm) / (2.0 * eps)


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    *,
    seed: int = 0,
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_entries: int | None = 64,
    label: str = "",
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn()`` against central differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor * max(1, |f|))``.
    The floor, scaled by the loss value ``f``, keeps entries whose gradient is
    below the round-off level of the central difference from producing
    spurious ratios.  At most ``max_entries`` coordinates per tensor are probed, picked
    with ``seed``.
    """
    if not isinstance(params, Mapping):
        params = {p.name or f"t{i}": p for i, p in enumerate(params)}
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    loss = fn()
    if loss.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {loss.shape}")
    loss.backward()
    floor = floor * max(1.0, abs(loss.item()))

    report = GradCheckReport(label=label, tol=tol)
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = np.arange(p.data.size)
        if max_entries is not None and flat.size > max_entries:
            flat = np.sort(rng.choice(flat, size=max_entries, replace=False))
        worst = 0.0
        for k in flat:
            idx = np.unravel_index(k, p.shape)
            num = numerical_grad(fn, p, idx, eps)
            ana = analytic[idx]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        report.results.append(GradCheckResult(name=name, max_rel_error=float(worst), checked=int(flat.size)))
    return report
