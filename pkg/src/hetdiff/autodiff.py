"""Dense/sparse float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves onto the innermost active :class:`Tape` when at
least one input requires a gradient; outside a tape they only compute
values.  ``Tape.backward`` replays the records in reverse, accumulating
gradients in tape order so results are bit-stable.

Example::

    w = Tensor(np.ones((3, 1)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.matmul(x, w))
    grads = tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels


class ContractError(ValueError):
    """An operation received inputs that violate its preconditions."""


class DimensionError(ContractError):
    """Operand shapes do not line up."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A row-major float64 array that may take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; every operator maps onto a module-level op
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
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


GradientMap = dict  # Tensor -> np.ndarray, keyed by identity


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records operations for a single reverse sweep.

    A tape belongs to the thread that entered it.  Nesting is allowed; only
    the innermost tape records.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        out._tape = self
        self.records.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientMap:
        """Gradients of the scalar ``loss`` for every leaf requiring grad.

        Leaves that the loss does not depend on receive zeros.  Each
        parameter's ``.grad`` is overwritten with its gradient.
        """
        if loss.values.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        leaves: dict[int, Tensor] = {}
        produced = {id(out) for out, _, _ in self.records}
        for out, inputs, fn in reversed(self.records):
            for t in inputs:
                if isinstance(t, Tensor) and t.requires_grad and id(t) not in produced:
                    leaves.setdefault(id(t), t)
            g = grads.pop(id(out), None)
            if g is None:
                continue
            contribs = fn(g)
            for t, c in zip(inputs, contribs):
                if c is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = c if prev is None else prev + c
        if loss.requires_grad and id(loss) not in produced:
            leaves.setdefault(id(loss), loss)

        targets = list(params) if params is not None else list(leaves.values())
        result: GradientMap = {}
        for p in targets:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.values)
            g = np.asarray(g, dtype=np.float64).reshape(p.shape)
            p.grad = g
            result[p] = g
        return result


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientMap:
    """Run the reverse sweep on the tape that produced ``loss``.

    A loss that was never recorded (for instance a constant) yields zero
    gradients for every requested parameter.
    """
    tape = loss._tape
    if tape is None:
        if loss.values.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        tape = Tape()
    return tape.backward(loss, params)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise and reductions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return add_scalar(b, float(a))
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add_scalar(a, float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.values + b.values, (a, b), lambda g: (g, g))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.values + c, (a,), lambda g: (g,))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add_scalar(a, -float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        b = _as_tensor(b)
        c = float(a)
        return _make(c - b.values, (b,), lambda g: (-g,))
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product.  Either side may be a python scalar."""
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        a, b = b, a
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return _make(a.values * c, (a,), lambda g: (g * c,))
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def square(a: Tensor) -> Tensor:
    av = a.values
    return _make(av * av, (a,), lambda g: (2.0 * av * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """x for x > 0, ``slope * x`` otherwise; the derivative at 0 is ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = a.values > 0
    factor = np.where(pos, 1.0, slope)
    return _make(a.values * factor, (a,), lambda g: (g * factor,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.values)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(a, floor)``; clamped entries pass no gradient."""
    x = a.values
    keep = x > floor
    clamped = np.where(keep, x, floor)
    with np.errstate(divide="ignore"):
        y = np.log(clamped)
        inv = np.where(keep, 1.0 / np.where(keep, x, 1.0), 0.0)
    return _make(y, (a,), lambda g: (g * inv,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.values.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    shape = a.shape
    return _make(np.asarray(a.values.sum() / n), (a,), lambda g: (np.full(shape, float(g) / n),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# Linear algebra and indexing
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def grad(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _make(av @ bv, (a, b), grad)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n bias to every row of an m x n matrix."""
    if x.values.ndim != 2 or bias.values.size != x.shape[1]:
        raise DimensionError(f"add_bias: bias of shape {bias.shape} does not fit {x.shape}")
    bshape = bias.shape
    return _make(
        x.values + bias.values.reshape(1, -1),
        (x, bias),
        lambda g: (g, g.sum(axis=0).reshape(bshape)),
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if any(t.values.ndim != 2 for t in tensors):
        raise DimensionError("concat expects matrices")
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise DimensionError(f"concat: mismatched shapes {[t.shape for t in tensors]}")
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), grad)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows; repeated indices accumulate their gradients."""
    idx = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"take_rows: index out of range for {n} rows")
    shape = x.shape

    def grad(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.values[idx], (x,), grad)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def grad(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _make(x.values[start:stop], (x,), grad)


def grouped_softmax(scores: Tensor, group_offsets) -> Tensor:
    """Softmax taken independently inside each contiguous group.

    ``group_offsets`` has one more entry than there are groups; group ``k``
    spans ``scores[offsets[k]:offsets[k+1]]``.  Each group is shifted by its
    own maximum before exponentiation.
    """
    offsets = np.asarray(group_offsets, dtype=np.int64)
    flat = scores.values.reshape(-1)
    if offsets.ndim != 1 or offsets.size < 1 or offsets[0] != 0 or offsets[-1] != flat.size:
        raise ContractError("group offsets must start at 0 and end at the score count")
    if np.any(np.diff(offsets) <= 0):
        raise ContractError("grouped_softmax: every group must be non-empty")
    shape = scores.shape
    y = _kernels.segment_softmax(np.ascontiguousarray(flat), offsets)

    def grad(g):
        return (_kernels.segment_softmax_grad(y, np.ascontiguousarray(g.reshape(-1)), offsets).reshape(shape),)

    return _make(y.reshape(shape), (scores,), grad)


def neighbor_sum(weights: Tensor, x: Tensor, src, dst, n_out: int) -> Tensor:
    """out[src[e]] += weights[e] * x[dst[e]]; duplicate (src, dst) pairs allowed."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    w = weights.values.reshape(-1)
    if w.size != src.size or src.size != dst.size:
        raise DimensionError("neighbor_sum: weights, src and dst must have equal length")
    xv = x.values
    wshape = weights.shape
    out = _kernels.coo_scatter(src, dst, np.ascontiguousarray(w), xv, n_out)

    def grad(g):
        gw = _kernels.coo_entry_dot(src, dst, g, xv).reshape(wshape) if weights.requires_grad else None
        gx = _kernels.coo_scatter(dst, src, np.ascontiguousarray(w), g, xv.shape[0]) if x.requires_grad else None
        return (gw, gx)

    return _make(out, (weights, x), grad)


# ---------------------------------------------------------------------------
# Sparse matrices
# ---------------------------------------------------------------------------


class SparseMatrix:
    """Coordinate-format matrix with lexicographically sorted, unique entries.

    ``values`` is either a plain array or a 1-D :class:`Tensor`; in the latter
    case :func:`spmm` propagates gradients into the entry values.
    """

    def __init__(self, n_rows: int, n_cols: int, row, col, values):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.row = np.asarray(row, dtype=np.int64)
        self.col = np.asarray(col, dtype=np.int64)
        self.values = values if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
        self._validate()

    def _validate(self) -> None:
        vals = self.vals
        if not (self.row.shape == self.col.shape == vals.shape) or self.row.ndim != 1:
            raise ContractError("sparse row, col and values must be 1-D and aligned")
        if self.row.size:
            if self.row.min() < 0 or self.row.max() >= self.n_rows or self.col.min() < 0 or self.col.max() >= self.n_cols:
                raise ContractError("sparse entry out of bounds")
            key = self.row * self.n_cols + self.col
            if np.any(np.diff(key) <= 0):
                raise ContractError("sparse entries must be sorted and duplicate-free")

    @classmethod
    def from_coo(cls, n_rows, n_cols, row, col, values) -> "SparseMatrix":
        """Sort entries and sum duplicates."""
        row = np.asarray(row, dtype=np.int64)
        col = np.asarray(col, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        key = row * int(n_cols) + col
        uniq, inv = np.unique(key, return_inverse=True)
        summed = np.zeros(uniq.size)
        np.add.at(summed, inv, values)
        return cls(n_rows, n_cols, uniq // int(n_cols), uniq % int(n_cols), summed)

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @property
    def shape(self) -> tuple:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.row.size)

    @property
    def vals(self) -> np.ndarray:
        return self.values.values if isinstance(self.values, Tensor) else self.values

    def with_values(self, values) -> "SparseMatrix":
        out = object.__new__(SparseMatrix)
        out.n_rows, out.n_cols, out.row, out.col = self.n_rows, self.n_cols, self.row, self.col
        out.values = values
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row, self.col] = self.vals
        return out

    def transpose(self) -> "SparseMatrix":
        order = np.lexsort((self.row, self.col))
        return SparseMatrix(self.n_cols, self.n_rows, self.col[order], self.row[order], self.vals[order])


def spmm(s: SparseMatrix, x: Tensor) -> Tensor:
    """Sparse-times-dense product ``s @ x``."""
    x = _as_tensor(x)
    if x.values.ndim != 2 or s.n_cols != x.shape[0]:
        raise DimensionError(f"spmm: cannot multiply {s.shape} sparse by {x.shape}")
    vals = np.ascontiguousarray(s.vals)
    xv = x.values
    out = _kernels.coo_scatter(s.row, s.col, vals, xv, s.n_rows)
    vt = s.values if isinstance(s.values, Tensor) else None

    def grad(g):
        gx = _kernels.coo_scatter(s.col, s.row, vals, g, s.n_cols) if x.requires_grad else None
        if vt is None:
            return (gx,)
        gv = _kernels.coo_entry_dot(s.row, s.col, g, xv) if vt.requires_grad else None
        return (gx, gv)

    inputs = (x,) if vt is None else (x, vt)
    return _make(out, inputs, grad)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def gradient_errors(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Worst relative error per parameter between ``backward`` and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values and must
    be deterministic.  The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    params = list(params)
    with Tape() as tape:
        loss = f()
    analytic = [g.copy() for g in tape.backward(loss, params).values()]
    errors = []
    for p, ga in zip(params, analytic):
        flat = p.values.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        errors.append(worst)
    return errors


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    if eps <= 0:
        raise ContractError("eps must be positive")
    errs = gradient_errors(f, params, eps)
    return max(errs) if errs else 0.0
