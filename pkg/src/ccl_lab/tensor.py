"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array plus an optional gradient slot. Operations
are dispatched through :func:`apply`, which records an op node whenever an
input participates in differentiation; :func:`backward` replays the
recorded nodes in reverse execution order. The op set is deliberately
small (row-oriented 2-D kernels plus scalar reductions) so every gradient
rule stays auditable, and :func:`finite_difference_check` provides the
independent oracle used to validate all of them.

Broadcasting is restricted to two shapes: a per-row scalar column
``(N, 1)`` against ``(N, C)``, and a per-row vector ``(C,)`` / ``(1, C)``
against ``(N, C)``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, EmptyTapeError

EPSILON = 1e-12
"""Floor used by clamp-guarded logs and normalization denominators."""

_DTYPES = {"double": np.float64, "single": np.float32}
_default_dtype = np.float64

OP_KINDS = (
    "add", "sub", "mul", "scalar_mul", "matmul", "relu", "exp", "log",
    "softmax_rows", "log_softmax_rows", "l2_normalize_rows", "sum", "mean",
    "transpose", "concat_rows", "select_rows", "clamp_min",
)

_node_counter = itertools.count()


def set_default_dtype(name: str) -> None:
    """Select 'double' or 'single' as the dtype for new tensors."""
    global _default_dtype
    if name not in _DTYPES:
        raise ContractError(f"unknown dtype {name!r}; expected 'double' or 'single'")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


class _Node:
    """One executed op on the tape: inputs, output, and the local vjp."""

    __slots__ = ("op_kind", "inputs", "vjp", "seq")

    def __init__(self, op_kind: str, inputs: tuple, vjp: Callable):
        self.op_kind = op_kind
        self.inputs = inputs
        self.vjp = vjp
        self.seq = next(_node_counter)


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[_Node] = None
        self._backward_done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})\n{self.data}"

    # Operator sugar; everything routes through apply().
    def __add__(self, other):
        return apply("add", [self, _wrap(other)])

    def __radd__(self, other):
        return apply("add", [_wrap(other), self])

    def __sub__(self, other):
        return apply("sub", [self, _wrap(other)])

    def __rsub__(self, other):
        return apply("sub", [_wrap(other), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scalar_mul", [self], {"value": float(other)})
        return apply("mul", [self, _wrap(other)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return apply("scalar_mul", [self], {"value": -1.0})

    def __matmul__(self, other):
        return apply("matmul", [self, _wrap(other)])

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return apply("sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return apply("mean", [self], {"axis": axis, "keepdims": keepdims})

    def transpose(self) -> "Tensor":
        return apply("transpose", [self])

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def clamp_min(self, minimum: float) -> "Tensor":
        return apply("clamp_min", [self], {"min": float(minimum)})

    def backward(self) -> None:
        backward(self)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    """Same shape, or (N,C) against a per-row scalar (N,1) / vector (C,)|(1,C)."""
    if a == b:
        return True
    for full, part in ((a, b), (b, a)):
        if len(full) == 2:
            n, c = full
            if part in ((n, 1), (1, c), (c,)):
                return True
    return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) < grad.ndim:
        grad = grad.sum(axis=0)
        return grad.reshape(shape)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, op_kind: str) -> None:
    if arr.size and not np.all(np.isfinite(arr)):
        raise DomainError(f"{op_kind} produced non-finite values")


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _axis_sum_grad(g: np.ndarray, x_shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, x_shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x_shape).copy()


def apply(op_kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Execute one op, recording it for backward when any input needs grad."""
    if op_kind not in OP_KINDS:
        raise ContractError(f"unknown op_kind {op_kind!r}")
    attrs = attrs or {}
    inputs = tuple(inputs)
    xs = [t.data for t in inputs]

    if op_kind in ("add", "sub", "mul"):
        a, b = xs
        if not _broadcast_ok(a.shape, b.shape):
            raise DimensionError(f"{op_kind}: shapes {a.shape} and {b.shape} do not conform")
        if op_kind == "add":
            out = a + b
            vjp = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
        elif op_kind == "sub":
            out = a - b
            vjp = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
        else:
            out = a * b
            vjp = lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))

    elif op_kind == "scalar_mul":
        (a,) = xs
        value = float(attrs["value"])
        out = a * value
        vjp = lambda g: (g * value,)

    elif op_kind == "matmul":
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        out = a @ b
        vjp = lambda g: (g @ b.T, a.T @ g)

    elif op_kind == "relu":
        (a,) = xs
        out = np.maximum(a, 0.0)
        vjp = lambda g: (g * (a > 0.0),)

    elif op_kind == "exp":
        (a,) = xs
        out = np.exp(a)
        e = out
        vjp = lambda g: (g * e,)

    elif op_kind == "log":
        (a,) = xs
        if a.size and a.min() <= 0.0:
            raise DomainError("log: non-positive input (clamp_min first)")
        out = np.log(a)
        vjp = lambda g: (g / a,)

    elif op_kind == "softmax_rows":
        (a,) = xs
        if a.ndim not in (1, 2):
            raise DimensionError("softmax_rows: expected 1-D or 2-D input")
        out = _softmax(a) if a.size else a.copy()
        y = out

        def vjp(g, y=y):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return ((g - dot) * y,)

    elif op_kind == "log_softmax_rows":
        (a,) = xs
        if a.ndim not in (1, 2):
            raise DimensionError("log_softmax_rows: expected 1-D or 2-D input")
        shifted = a - a.max(axis=-1, keepdims=True) if a.size else a
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) if a.size else a.copy()
        soft = np.exp(out) if a.size else a

        def vjp(g, soft=soft):
            return (g - soft * g.sum(axis=-1, keepdims=True),)

    elif op_kind == "l2_normalize_rows":
        (a,) = xs
        if a.ndim not in (1, 2):
            raise DimensionError("l2_normalize_rows: expected 1-D or 2-D input")
        norms = np.sqrt((a * a).sum(axis=-1, keepdims=True))
        if a.size and norms.min() == 0.0:
            raise DomainError("l2_normalize_rows: zero-norm row")
        denom = np.maximum(norms, EPSILON)
        out = a / denom

        def vjp(g, a=a, denom=denom):
            dot = (g * a).sum(axis=-1, keepdims=True)
            return (g / denom - a * dot / denom**3,)

    elif op_kind in ("sum", "mean"):
        (a,) = xs
        axis = attrs.get("axis")
        keepdims = bool(attrs.get("keepdims", False))
        if op_kind == "sum":
            out = a.sum(axis=axis, keepdims=keepdims)
            vjp = lambda g: (_axis_sum_grad(np.asarray(g), a.shape, axis, keepdims),)
        else:
            count = a.size if axis is None else a.shape[axis]
            if count == 0:
                raise DomainError("mean: empty reduction")
            out = a.mean(axis=axis, keepdims=keepdims)
            vjp = lambda g: (_axis_sum_grad(np.asarray(g), a.shape, axis, keepdims) / count,)

    elif op_kind == "transpose":
        (a,) = xs
        if a.ndim != 2:
            raise DimensionError("transpose: expected 2-D input")
        out = a.T.copy()
        vjp = lambda g: (g.T,)

    elif op_kind == "concat_rows":
        if not inputs:
            raise ContractError("concat_rows: needs at least one input")
        widths = {x.shape[1:] for x in xs}
        if len(widths) != 1:
            raise DimensionError("concat_rows: row widths differ")
        out = np.concatenate(xs, axis=0)
        sizes = [x.shape[0] for x in xs]
        bounds = np.cumsum([0] + sizes)

        def vjp(g, bounds=bounds):
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    elif op_kind == "select_rows":
        (a,) = xs
        indices = np.asarray(attrs["indices"], dtype=np.int64)
        if a.ndim == 0:
            raise DimensionError("select_rows: scalar input")
        if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
            raise DimensionError("select_rows: index out of range")
        out = a[indices]

        def vjp(g, indices=indices):
            acc = np.zeros_like(a)
            np.add.at(acc, indices, g)
            return (acc,)

    elif op_kind == "clamp_min":
        (a,) = xs
        minimum = float(attrs["min"])
        out = np.maximum(a, minimum)
        vjp = lambda g: (g * (a > minimum),)

    else:  # pragma: no cover - OP_KINDS guard above
        raise ContractError(op_kind)

    _check_finite(np.asarray(out), op_kind)
    result = Tensor(out, dtype=np.asarray(out).dtype)
    if any(t.requires_grad or t._node is not None for t in inputs):
        result.requires_grad = True
        result._node = _Node(op_kind, inputs, vjp)
    return result


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    Nodes are visited exactly once, in reverse execution order, so the
    result is deterministic for a fixed tape.
    """
    if loss.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise ContractError("backward already ran on this tensor; rebuild the graph to rerun")
    if loss._node is None:
        raise EmptyTapeError("loss is not connected to any recorded op")

    tape: list[_Node] = []
    seen: set[int] = set()
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        tape.append(node)
        for parent in node.inputs:
            if parent._node is not None:
                stack.append(parent._node)
    tape.sort(key=lambda n: n.seq)

    # Each node is the producer of exactly one tensor; recover that mapping
    # so gradient totals can be keyed by tensor identity.
    outputs: dict[int, Tensor] = {id(loss._node): loss}
    for node in tape:
        for parent in node.inputs:
            if parent._node is not None:
                outputs[id(parent._node)] = parent

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape):
        g = grads.pop(id(outputs[id(node)]), None)
        if g is None:
            continue
        for parent, pg in zip(node.inputs, node.vjp(g)):
            if pg is None or (parent._node is None and not parent.requires_grad):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=parent.data.dtype, copy=True)

    for leaf in _collect_leaves(loss):
        total = grads.get(id(leaf))
        if total is None:
            continue
        leaf.grad = total if leaf.grad is None else leaf.grad + total
    loss._backward_done = True


def _collect_leaves(loss: Tensor) -> list[Tensor]:
    leaves: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is None:
            if t.requires_grad:
                leaves.append(t)
        else:
            stack.extend(t._node.inputs)
    return leaves


def finite_difference_check(fn: Callable[[Tensor], Tensor], point: Tensor,
                            eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    `fn` must map a tensor to a scalar Tensor. The analytic gradient comes
    from one reverse pass; each coordinate is then perturbed by ±eps and
    the central difference compared as |analytic - fd| / max(1, |analytic|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(point.data, dtype=np.float64, copy=True)

    x = Tensor(base.copy(), requires_grad=True)
    loss = fn(x)
    if loss.shape != ():
        raise ContractError("fn must return a scalar")
    if not np.isfinite(loss.data):
        raise DomainError("fn returned a non-finite value")
    if loss._node is None:
        analytic = np.zeros_like(base)
    else:
        backward(loss)
        analytic = x.grad if x.grad is not None else np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn(Tensor(base.copy())).data)
        flat[i] = orig - eps
        down = float(fn(Tensor(base.copy())).data)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise DomainError("fn returned a non-finite value during perturbation")
        fd[i] = (up - down) / (2.0 * eps)
    analytic_flat = analytic.reshape(-1)
    for a, f in zip(analytic_flat, fd):
        err = abs(a - f) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst


def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Row-wise one-hot encoding (plain array; labels are not differentiated)."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=_default_dtype)
    if labels.size:
        out[np.arange(labels.shape[0]), labels] = 1.0
    return out
