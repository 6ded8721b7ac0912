"""Dense reverse-mode automatic differentiation on numpy arrays.

Every differentiable computation in the package runs through :class:`Tensor`
objects whose operations are appended to the active :class:`Tape`.  Calling
:meth:`Tape.backward` on a scalar result replays the tape in reverse and
leaves ``grad`` on every tensor that the result depends on.

Operations executed while no tape is active are not recorded, which is how
evaluation passes avoid paying for gradient bookkeeping::

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(x * x)
    tape.backward(loss)
    x.grad  # array([2., 4., 6.])
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_ACTIVE: list["Tape"] = []


class Tensor:
    """A float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar; all routes go through the module-level primitives
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive operations executed inside its context."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> None:
        out._tape = self
        self.records.append((out, parents, vjp))
        self._outputs.add(id(out))

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(t) into ``t.grad`` for every t reachable from root.

        Leaf tensors accumulate into an existing ``grad``; intermediates are
        overwritten.  Tensors that root does not depend on are left alone.
        """
        if root.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
        if id(root) not in self._outputs:
            raise ValueError("root was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        touched: dict[int, Tensor] = {id(root): root}
        for out, parents, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            parent_grads = vjp(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    touched[key] = p
        # whatever is left in grads belongs to leaves (never produced on tape)
        for key, g in grads.items():
            leaf = touched[key]
            if leaf.grad is None or leaf.grad.shape != g.shape:
                leaf.grad = np.array(g, dtype=np.float64)
            else:
                leaf.grad = leaf.grad + g


def backward(root: Tensor) -> None:
    """Back-propagate from a scalar produced on some tape."""
    if root._tape is None:
        raise ValueError("root is not recorded on any tape")
    root._tape.backward(root)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    out.requires_grad = False
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE[-1].record(out, parents, vjp)
    return out


def _shape_error(op: str, a, b) -> ValueError:
    return ValueError(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")


def _check_finite(op: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{op}: non-finite input")


# ----------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), vjp)


def spmm(op, x: Tensor) -> Tensor:
    """Left-multiply by a constant (dense or scipy.sparse) matrix.

    Used for graph propagation and pooling, where the operator carries no
    gradient of its own.
    """
    if op.ndim != 2 or x.data.ndim != 2 or op.shape[1] != x.shape[0]:
        raise _shape_error("spmm", op.shape, x.shape)
    opT = op.T.tocsr() if sp.issparse(op) else op.T

    def vjp(g):
        return (np.asarray(opT @ g),)

    return _result(np.asarray(op @ x.data), (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over the rows of ``a``."""
    A, B = a.data, b.data
    if A.shape == B.shape:
        return _result(A + B, (a, b), lambda g: (g, g))
    if A.ndim == 2 and (B.shape == (A.shape[1],) or B.shape == (1, A.shape[1])):
        def vjp(g):
            return g, g.sum(axis=0).reshape(B.shape)

        return _result(A + B.reshape(1, -1), (a, b), vjp)
    raise _shape_error("add", A.shape, B.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def log(a: Tensor) -> Tensor:
    A = a.data
    _check_finite("log", A)
    if np.any(A <= 0):
        raise ValueError("log: non-positive input")
    return _result(np.log(A), (a,), lambda g: (g / A,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    A = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(A)
    pos = A >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-A[pos]))
    e = np.exp(A[~pos])
    out[~pos] = e / (1.0 + e)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix (a vector is treated as one row)."""
    A = a.data
    _check_finite("softmax", A)
    A2 = A.reshape(1, -1) if A.ndim == 1 else A
    z = np.exp(A2 - A2.max(axis=1, keepdims=True))
    out = z / z.sum(axis=1, keepdims=True)

    def vjp(g):
        g2 = g.reshape(out.shape)
        return ((out * (g2 - (g2 * out).sum(axis=1, keepdims=True))).reshape(A.shape),)

    return _result(out.reshape(A.shape), (a,), vjp)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    if axis is None:
        return _result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis, keepdims=True)
    return _result(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if a.size == 0:
        raise ValueError("mean of an empty tensor")
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of nothing")
    arrays = [t.data for t in tensors]
    ref = arrays[0].shape
    for arr in arrays[1:]:
        if arr.ndim != len(ref) or any(
            arr.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise _shape_error("concat", ref, arr.shape)
    cuts = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate(arrays, axis=axis), tuple(tensors), vjp)


def select_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise IndexError(f"select_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), vjp)


def clip(a: Tensor, lo: float = -math.inf, hi: float = math.inf) -> Tensor:
    """Clamp values; gradient passes only where the input was inside [lo, hi]."""
    A = a.data
    inside = (A >= lo) & (A <= hi)
    return _result(np.clip(A, lo, hi), (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------- optimizers


class Optimizer:
    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def _check(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name or p!r} has no gradient")

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Plain gradient descent."""

    def step(self) -> None:
        self._check()
        for p in self.params:
            p.data -= self.lr * p.grad
            p.grad = None


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self._check()
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def make_optimizer(kind: str, params: Iterable[Tensor], lr: float, betas=(0.9, 0.999)) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr=lr, betas=betas)
    if kind == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
