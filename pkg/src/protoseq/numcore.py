"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation executed while a :class:`Tape` is active is
appended to it; :func:`backward` walks the tape in reverse.  The tape also
keeps a *branch signature* (relu sign patterns, max/argmax positions) which
:func:`grad_check` uses to skip finite-difference probes that straddle a
non-differentiable point.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class no_grad:
    """Context manager disabling graph construction on this thread."""

    def __enter__(self):
        self.prev = getattr(_local, "no_grad", False)
        _local.no_grad = True
        return self

    def __exit__(self, *exc):
        _local.no_grad = self.prev


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.branches: list[np.ndarray] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def record_branch(self, signature: np.ndarray) -> None:
        self.branches.append(signature)

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []
        self.branches = []

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data.item()) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable tensor carrying its own Adam moment estimates."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents) and not getattr(_local, "no_grad", False)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        tape = active_tape()
        if tape is not None:
            tape.record(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    tape = active_tape()
    if tape is not None:
        tape.record_branch(on)
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def dropout(a, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def elementwise(a, b=None, kind: str = "add", *, p: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Dispatch helper mirroring the op table: add, mul, sub, relu, dropout, neg."""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "relu":
        return relu(a)
    if kind == "neg":
        return neg(a)
    if kind == "dropout":
        return dropout(a, p, rng, training)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) / float(n)


def tmax(a, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    tape = active_tape()
    if tape is not None:
        tape.record_branch(idx)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), bw, "max")


def logsumexp(a, axis: int = -1) -> Tensor:
    """Max-shifted log-sum-exp along ``axis`` (reduced)."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = shifted / s

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _make(out, (a,), bw, "logsumexp")


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not tensors")

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index], dtype=DTYPE), (a,), bw, "getitem")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


# ---------------------------------------------------------------- backward


def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    With a tape, nodes are replayed in reverse recording order; without one
    the graph is sorted from ``loss``.  Intermediate gradients live only for
    the duration of the call.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = tape.nodes if tape is not None else _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent._backward is None:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if loss._backward is None and loss.requires_grad:
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + 1.0


# ---------------------------------------------------------------- optimizer


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '?'} has no gradient")
    b1, b2 = betas
    for p in params:
        g = p.grad
        p.step_count += 1
        p.adam_m = b1 * p.adam_m + (1.0 - b1) * g
        p.adam_v = b2 * p.adam_v + (1.0 - b2) * g * g
        m_hat = p.adam_m / (1.0 - b1**p.step_count)
        v_hat = p.adam_v / (1.0 - b2**p.step_count)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: int
    excluded: int
    tol: float
    worst: tuple | None = None
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def __str__(self) -> str:
        status = "OK" if self.ok else "FAIL"
        return (
            f"gradcheck {status}: max rel err {self.max_rel_err:.3e} over {self.checked} entries "
            f"({self.excluded} excluded at kinks), tol {self.tol:g}"
        )


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


_ROUNDOFF_FACTOR = 8.0


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward() gradients against central differences.

    ``f`` must rebuild the graph deterministically on every call.  With
    ``max_entries`` set, that many entries per parameter are sampled with
    ``rng``; otherwise every entry is probed.  Probes whose perturbed
    forward passes take a different relu/max branch are excluded.

    The relative error denominator is floored at ``floor`` and at the
    rounding noise of the difference quotient divided by ``tol``, so
    gradients too small for finite differences to resolve are compared
    in absolute terms.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    base_branches = tape.branches
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    tape.clear()

    def probe() -> tuple[float, list]:
        with Tape() as t:
            val = f().item()
        branches = t.branches
        t.clear()
        return val, branches

    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(max_rel_err=0.0, checked=0, excluded=0, tol=tol)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for e in entries:
            orig = flat[e]
            flat[e] = orig + h
            fp, bp = probe()
            flat[e] = orig - h
            fm, bm = probe()
            flat[e] = orig
            if not (_same_branches(bp, base_branches) and _same_branches(bm, base_branches)):
                report.excluded += 1
                continue
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[pi].reshape(-1)[e]
            # below this magnitude the difference quotient is dominated by rounding in f
            noise = _ROUNDOFF_FACTOR * np.finfo(float).eps * max(abs(fp), abs(fm)) / h
            err = relative_error(a, numeric, max(floor, noise / tol))
            report.checked += 1
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = (p.name, int(e), float(a), float(numeric))
            if err > tol:
                report.failures.append((p.name, int(e), float(a), float(numeric), err))
    for p in params:
        p.grad = None
    return report
