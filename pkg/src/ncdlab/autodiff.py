"""Dense float64 tensors with a reverse-mode gradient tape.

Every operation validates that its output is finite; NaN/Inf aborts the
step immediately instead of propagating into the optimizer.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf values."""


class Tensor:
    """A float64 array that can participate in reverse-mode differentiation.

    Tensors created by operations record their parents and a local adjoint
    rule; ``backward`` replays those records in reverse topological order.
    Value-semantic: the public constructor copies its input.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @classmethod
    def _from_op(cls, values: np.ndarray, parents: tuple[Tensor, ...],
                 vjp: Callable[[np.ndarray], tuple] | None, op: str) -> Tensor:
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the module-level functions hold the actual rules
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


class Tape:
    """Topologically ordered record of the ops reachable from a root.

    Parents always precede children, so one reversed sweep visits every
    node exactly once with its adjoint fully accumulated.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every reachable tensor."""
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.trace(loss)
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.values)
            parent.grad += g


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.values + b.values

    def vjp(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return Tensor._from_op(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.values - b.values

    def vjp(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)

    return Tensor._from_op(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.values * b.values

    def vjp(g):
        return (_unbroadcast(g * b.values, a.values.shape),
                _unbroadcast(g * a.values, b.values.shape))

    return Tensor._from_op(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if np.any(b.values == 0.0):
        raise ValueError("division by zero")
    out = a.values / b.values

    def vjp(g):
        return (_unbroadcast(g / b.values, a.values.shape),
                _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape))

    return Tensor._from_op(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = _coerce(a)
    return Tensor._from_op(-a.values, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.values)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def ln(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.values <= 0.0):
        raise ValueError("ln requires strictly positive inputs")
    out = np.log(a.values)
    return Tensor._from_op(out, (a,), lambda g: (g / a.values,), "ln")


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.values)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.values.shape[1] != b.values.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.values.shape} x {b.values.shape}")
    out = a.values @ b.values

    def vjp(g):
        return g @ b.values.T, a.values.T @ g

    return Tensor._from_op(out, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    a = _coerce(a)
    return Tensor._from_op(a.values.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.values.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), vjp, "sum")


def reduce_mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    count = a.values.size if axis is None else a.values.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.values.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        mask = np.zeros_like(a.values)
        if axis is None:
            flat_idx = int(np.argmax(a.values))
            mask.reshape(-1)[flat_idx] = 1.0
            return (mask * g,)
        idx = np.argmax(a.values, axis=axis)
        np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (mask * g,)

    return Tensor._from_op(np.asarray(out), (a,), vjp, "max")


def softmax(logits, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of logits/temperature, stabilized by row-max subtraction."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    a = _coerce(logits)
    z = a.values / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((out * (g - inner)) / temperature,)

    return Tensor._from_op(out, (a,), vjp, "softmax")


def log_softmax(logits, temperature: float = 1.0) -> Tensor:
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    a = _coerce(logits)
    z = a.values / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return Tensor._from_op(out, (a,), vjp, "log_softmax")


def l2_normalize_rows(a) -> Tensor:
    a = _coerce(a)
    norms = np.linalg.norm(a.values, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot L2-normalize a zero row")
    out = a.values / norms

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * inner) / norms,)

    return Tensor._from_op(out, (a,), vjp, "l2_normalize_rows")


def concat_cols(a, b) -> Tensor:
    """Concatenate two matrices along the column (class) axis."""
    a, b = _coerce(a), _coerce(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("concat_cols expects 2-D operands")
    if a.values.shape[0] != b.values.shape[0]:
        raise ValueError("concat_cols row counts differ")
    na = a.values.shape[1]
    out = np.concatenate([a.values, b.values], axis=1)

    def vjp(g):
        return g[:, :na].copy(), g[:, na:].copy()

    return Tensor._from_op(out, (a, b), vjp, "concat_cols")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    if a.values.ndim != 2:
        raise ValueError("slice_cols expects a 2-D operand")
    out = a.values[:, start:stop].copy()

    def vjp(g):
        full = np.zeros_like(a.values)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(out, (a,), vjp, "slice_cols")


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    if a.values.ndim != 2:
        raise ValueError("slice_rows expects a 2-D operand")
    out = a.values[start:stop, :].copy()

    def vjp(g):
        full = np.zeros_like(a.values)
        full[start:stop, :] = g
        return (full,)

    return Tensor._from_op(out, (a,), vjp, "slice_rows")


def clamp_min(a, floor: float) -> Tensor:
    a = _coerce(a)
    out = np.maximum(a.values, floor)
    mask = a.values > floor
    return Tensor._from_op(out, (a,), lambda g: (g * mask,), "clamp_min")


def stop_gradient(a) -> Tensor:
    """Forward identity whose backward pass propagates a zero adjoint."""
    a = _coerce(a)
    return Tensor(a.values.copy(), requires_grad=False)
