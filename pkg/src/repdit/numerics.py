"""Dense float64 tensors with a reverse-mode tape.

Every value is a :class:`Tensor` wrapping a row-major ``numpy`` array. Operations
record a local backward rule on the output tensor; :meth:`Tensor.backward` walks
the recorded graph once in reverse topological order and frees it afterwards.

Only scalar broadcasting is supported: binary operations require equal shapes
unless one operand is a Python number or a single-element tensor. Expanding a
vector over rows is done explicitly with :func:`expand`.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "sigmoid",
    "gelu",
    "elementwise",
    "matmul",
    "softmax",
    "layer_norm",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "expand",
    "take",
    "square",
    "backward",
    "grad_check",
    "grad_check_params",
]

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (context-local)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
    return arr


class Tensor:
    """A float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], rule, op: str, check: bool = True) -> Tensor:
    out = Tensor.__new__(Tensor)
    # a sum is finite iff every term is (barring overflow near 1e308); ops that only
    # rearrange already-finite values pass check=False
    if check and not np.isfinite(data.sum()):
        raise NonFiniteError(f"{op} produced a non-finite value (shape {data.shape})")
    out.data = data
    out.grad = None
    out.op = op
    tracked = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out._parents = parents
        out._backward = rule
    else:
        out._parents = ()
        out._backward = None
    return out


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_to(grad: np.ndarray, like: Tensor) -> np.ndarray:
    if grad.shape == like.shape:
        return grad
    return np.asarray(grad.sum()).reshape(like.shape)


def _check_binary(name: str, a: Tensor, b) -> None:
    if isinstance(b, Tensor) and a.shape != b.shape and not (a.size == 1 or b.size == 1):
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    _check_binary("add", a, b)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,), "add")
    b_ = b

    def rule(g):
        return _sum_to(g, a), _sum_to(g, b_)

    return _result(a.data + b_.data, (a, b_), rule, "add")


def sub(a, b) -> Tensor:
    a = _ensure(a)
    _check_binary("sub", a, b)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data - c, (a,), lambda g: (g,), "sub")

    def rule(g):
        return _sum_to(g, a), _sum_to(-g, b)

    return _result(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    _check_binary("mul", a, b)
    if not isinstance(b, Tensor):
        return scale(a, b)

    def rule(g):
        return _sum_to(g * b.data, a), _sum_to(g * a.data, b)

    return _result(a.data * b.data, (a, b), rule, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg", check=False)


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sigmoid(a: Tensor) -> Tensor:
    a = _ensure(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    a = _ensure(a)
    x = a.data
    x2 = x * x
    th = x2 * _GELU_C
    th += 1.0
    th *= x
    th *= _SQRT_2_OVER_PI
    np.tanh(th, out=th)
    y = th + 1.0
    y *= x
    y *= 0.5

    def rule(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) sqrt(2/pi) (1 + 3 c x^2)
        dinner = x2 * (3.0 * _GELU_C)
        dinner += 1.0
        dinner *= _SQRT_2_OVER_PI
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        sech2 *= x
        sech2 *= dinner
        sech2 += th
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return _result(y, (a,), rule, "gelu")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": lambda a, b: scale(a, b),
    "sigmoid": lambda a, b=None: sigmoid(a),
    "gelu": lambda a, b=None: gelu(a),
}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name to one of ``add, sub, mul, scale, sigmoid, gelu``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(_ensure(a), b)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(m, k) @ (k, n)``, or the same per slice for equal-length 3-D stacks."""
    a, b = _ensure(a), _ensure(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

        def rule(g):
            return (g @ b.data.T if a.requires_grad else None,
                    a.data.T @ g if b.requires_grad else None)

    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: incompatible batched shapes {a.shape} @ {b.shape}")

        def rule(g):
            return (g @ b.data.transpose(0, 2, 1) if a.requires_grad else None,
                    a.data.transpose(0, 2, 1) @ g if b.requires_grad else None)

    else:
        raise ShapeError(f"matmul: expected two 2-D or two 3-D operands, got {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), rule, "matmul")


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _ensure(x)
    ax = _axis(x, axis)
    y = x.data - x.data.max(axis=ax, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=ax, keepdims=True)

    def rule(g):
        out = g * y
        s = out.sum(axis=ax, keepdims=True)
        np.subtract(g, s, out=out)
        out *= y
        return (out,)

    return _result(y, (x,), rule, "softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional per-channel gain and bias."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x = _ensure(x)
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: {name} shape {p.shape} does not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    lead = tuple(range(x.ndim - 1))
    parents = tuple(p for p in (x, gain, bias) if p is not None)

    def rule(g):
        dxhat = g * gain.data if gain is not None else g
        dx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return _result(y, parents, rule, "layer_norm")


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    x = _ensure(x)
    if axis is None:
        shape = x.shape

        def rule(g):
            return (np.broadcast_to(g, shape).copy(),)

        return _result(np.asarray(x.data.sum()), (x,), rule, "reduce_sum")
    ax = _axis(x, axis)
    n = x.shape[ax]

    def rule(g):
        return (np.repeat(np.expand_dims(g, ax), n, axis=ax),)

    return _result(x.data.sum(axis=ax), (x,), rule, "reduce_sum")


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Arithmetic mean over ``axis`` (all elements when ``None``)."""
    x = _ensure(x)
    if axis is None:
        n = x.size
        shape = x.shape

        def rule(g):
            return (np.full(shape, float(g) / n),)

        return _result(np.asarray(x.data.sum() / n), (x,), rule, "reduce_mean")
    ax = _axis(x, axis)
    n = x.shape[ax]

    def rule(g):
        return (np.repeat(np.expand_dims(g / n, ax), n, axis=ax),)

    return _result(x.data.sum(axis=ax) / n, (x,), rule, "reduce_mean")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _ensure(x)
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    old = x.shape
    return _result(y, (x,), lambda g: (g.reshape(old),), "reshape", check=False)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = _ensure(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose", check=False)


def _getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(x.data[idx]), (x,), rule, "getitem", check=False)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate on backward."""
    x = _ensure(x)
    ax = _axis(x, axis)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[ax]):
        raise IndexError(f"take: index out of range for axis of length {x.shape[ax]}")
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _result(np.take(x.data, idx, axis=ax), (x,), rule, "take", check=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    ax = _axis(tensors[0], axis)
    sizes = [t.shape[ax] for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {ax}") from None
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return np.split(g, splits, axis=ax)

    return _result(y, tuple(tensors), rule, "concat", check=False)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: empty input")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    y = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % y.ndim

    def rule(g):
        return [np.take(g, i, axis=ax) for i in range(len(tensors))]

    return _result(y, tuple(tensors), rule, "stack", check=False)


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    x = _ensure(x)
    ax = axis % (x.ndim + 1)
    # read-only broadcast view; every consumer allocates its own output
    y = np.broadcast_to(np.expand_dims(x.data, ax), x.shape[:ax] + (n,) + x.shape[ax:])
    return _result(y, (x,), lambda g: (g.sum(axis=ax),), "expand", check=False)


# ---------------------------------------------------------------------------
# backward


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls; the recorded graph is released.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# finite-difference oracle


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-4) -> float:
    """Max relative error between backward and central differences of scalar ``f`` at ``x``.

    The denominator per coordinate is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += h
            xm = flat.copy()
            xm[i] -= h
            fp = f(Tensor(xp.reshape(base.shape))).item()
            fm = f(Tensor(xm.reshape(base.shape))).item()
            nflat[i] = (fp - fm) / (2.0 * h)
    return _relative_error(analytic, numeric)


def grad_check_params(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-4,
    names: Iterable[str] | None = None,
) -> dict[str, float]:
    """Like :func:`grad_check` but over every coordinate of a parameter dict.

    Returns the max relative error per parameter name. ``f`` receives a fresh
    dict each call, so the input tensors are never mutated.
    """
    names = list(params) if names is None else list(names)
    leaves = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}
    f(leaves).backward()
    report: dict[str, float] = {}
    with no_grad():
        for name in names:
            base = params[name].data
            analytic = leaves[name].grad if leaves[name].grad is not None else np.zeros_like(base)
            numeric = np.zeros(base.size)
            flat = base.reshape(-1)
            for i in range(flat.size):
                vals = []
                for step in (h, -h):
                    xp = flat.copy()
                    xp[i] += step
                    trial = dict(params)
                    trial[name] = Tensor(xp.reshape(base.shape))
                    vals.append(f(trial).item())
                numeric[i] = (vals[0] - vals[1]) / (2.0 * h)
            report[name] = _relative_error(analytic.reshape(-1), numeric)
    return report
