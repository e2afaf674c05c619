"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every forward ``matmul`` reports its multiply-accumulate count to the
active :class:`OpCounter` objects (see :func:`count_ops`), which is how the
analytic cost model is checked against what the kernels actually do.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from collections.abc import Callable, Iterator, Sequence

import numpy as np

from .errors import DegenerateRowError, GraphError, NumericError, ShapeError

# Additive "minus infinity". exp() of it underflows to exactly 0 without
# producing NaN from inf - inf.
SENTINEL = -1e30

# ----------------------------------------------------------------------------
# operation counting


class OpCounter:
    """Multiply-accumulate counts broken down by operation label.

    One multiply plus one add counts as a single unit.
    """

    def __init__(self) -> None:
        self.by_label: dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.by_label.values())

    def add(self, label: str, n: int) -> None:
        if n < 0:
            raise ValueError("operation counts are non-negative")
        self.by_label[label] = self.by_label.get(label, 0) + int(n)

    def merge(self, other: OpCounter) -> OpCounter:
        for label, n in other.by_label.items():
            self.add(label, n)
        return self

    def prefixed(self, prefix: str) -> int:
        """Sum of all labels starting with ``prefix``."""
        return sum(n for label, n in self.by_label.items() if label.startswith(prefix))

    def __getitem__(self, label: str) -> int:
        return self.by_label.get(label, 0)

    def __contains__(self, label: str) -> bool:
        return label in self.by_label

    def __repr__(self) -> str:
        return f"OpCounter(total={self.total}, by_label={self.by_label})"


_active_counters: contextvars.ContextVar[tuple[OpCounter, ...]] = contextvars.ContextVar(
    "lasformer_active_counters", default=()
)


@contextlib.contextmanager
def count_ops(counter: OpCounter | None = None) -> Iterator[OpCounter]:
    """Route operation counts of the enclosed computation into ``counter``.

    Nested contexts all receive the counts.
    """
    counter = OpCounter() if counter is None else counter
    token = _active_counters.set(_active_counters.get() + (counter,))
    try:
        yield counter
    finally:
        _active_counters.reset(token)


@contextlib.contextmanager
def uncounted() -> Iterator[None]:
    """Suspend counting, e.g. for diagnostics computed beside the hot path."""
    token = _active_counters.set(())
    try:
        yield
    finally:
        _active_counters.reset(token)


def record_ops(label: str, n: int) -> None:
    for counter in _active_counters.get():
        counter.add(label, n)


# ----------------------------------------------------------------------------
# tensor and graph


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: BackwardFn | None = None
        self._consumed = False
        self.name = name

    # construction helpers -------------------------------------------------

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
        """Create the result of an operation; the graph is kept only if needed."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # autodiff -------------------------------------------------------------

    def backward(self) -> None:
        backward(self)

    # operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other, "matmul")

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:  # noqa: N802
        return swap_last(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor feeding ``loss``.

    Leaf gradients accumulate across calls; a given graph can be
    differentiated once.
    """
    if loss.data.ndim > 1 or loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise ShapeError(f"gradient shape {pg.shape} does not match tensor shape {parent.shape}")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# ----------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor.from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor.from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return Tensor.from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); zero gradient where the floor is active."""
    active = a.data > lo
    return Tensor.from_op(np.where(active, a.data, lo), (a,), lambda g: (g * active,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return Tensor.from_op(a.data * pos, (a,), lambda g: (g * pos,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor, label: str) -> Tensor:
    """Batched matrix product ``a @ b`` counted under ``label``.

    Increments the active counters by batch * rows * inner * cols.
    """
    if not label:
        raise ValueError("matmul needs a non-empty operation label")
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch mismatch: {a.shape} x {b.shape}") from exc
    out = np.matmul(a.data, b.data)
    record_ops(label, int(np.prod(batch, dtype=np.int64)) * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return Tensor.from_op(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None, label: str) -> Tensor:
    y = matmul(x, weight, label)
    return y if bias is None else y + bias


# ----------------------------------------------------------------------------
# normalisation


def _check_rows(additive: np.ndarray) -> None:
    dead = np.all(additive <= SENTINEL / 2, axis=-1)
    if np.any(dead):
        rows = np.argwhere(dead)
        raise DegenerateRowError(
            f"{len(rows)} softmax row(s) have no admissible position, first at index {tuple(rows[0])}"
        )


def softmax_rows(x: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis, optionally after adding a 0/SENTINEL mask."""
    x = _as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one column")
    z = x.data
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        try:
            z = z + m
        except ValueError as exc:
            raise ShapeError(f"mask shape {m.shape} does not match {x.shape}") from exc
        _check_rows(np.broadcast_to(m, z.shape))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor.from_op(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor.from_op(out, (x, gamma, beta), bw)


# ----------------------------------------------------------------------------
# indexing and regularisation


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return Tensor.from_op(weight.data[ids], (weight,), bw)


def take_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """``out[..., i] = x[..., i, ids[..., i]]`` style gather along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    idx = ids[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return Tensor.from_op(out, (x,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# gradient checking


def _max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def finite_difference_check(
    f: Callable[..., Tensor],
    x,
    h: float = 1e-5,
) -> float:
    """Compare autodiff gradients against central differences.

    ``x`` is an array/Tensor or a sequence of them; ``f`` receives the
    tensors positionally and returns a scalar Tensor. Returns the max over
    all coordinates of ``|analytic - central| / max(|analytic|, |central|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    multi = isinstance(x, (list, tuple))
    arrays = [np.array(_as_tensor(v).data, dtype=np.float64) for v in (x if multi else [x])]

    def value(*vals: np.ndarray) -> float:
        out = f(*[Tensor(v) for v in vals]).data
        v = float(out.reshape(-1)[0])
        if not math.isfinite(v):
            raise NumericError(f"function value is not finite: {v!r}")
        return v

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function value is not finite")
    backward(out)

    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = value(*arrays)
            flat[j] = orig - h
            fm = value(*arrays)
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * h)
        worst = max(worst, _max_relative_error(analytic, numeric))
    return worst
