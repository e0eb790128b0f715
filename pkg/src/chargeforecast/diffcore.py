"""Small reverse-mode gradient engine over float64 numpy arrays.

Graphs are built eagerly: every op evaluates its forward value when it is
called and records a closure that maps the output adjoint to input adjoints.
``backward`` walks the graph once in reverse topological order and returns
the adjoints of the requested leaves. Cached forward values are never
mutated, so independent graphs can share parameter arrays freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class Tensor:
    __slots__ = ("data", "op", "parents", "_backward", "requires_grad", "name")

    def __init__(self, data, op: str = "leaf", parents: tuple = (),
                 backward: Callable | None = None, requires_grad: bool = False,
                 name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.op = op
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf whose gradient is tracked."""
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op, parents, backward) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, op=op, parents=parents, backward=backward)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a, b)
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (unbroadcast(g, a.shape), -unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Hadamard product with broadcasting (also covers scalar scaling)."""
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape),
                            unbroadcast(g * a.data, b.shape)))


def square(x) -> Tensor:
    x = _lift(x)
    return _node(x.data * x.data, "square", (x,), lambda g: (2.0 * x.data * g,))


def sigmoid(x) -> Tensor:
    x = _lift(x)
    # tanh form avoids overflow in exp for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)
    return _node(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _lift(x)
    pos = x.data > 0
    if 0.0 <= slope <= 1.0:
        out = np.maximum(x.data, slope * x.data)
    else:
        out = np.where(pos, x.data, slope * x.data)
    return _node(out, "leaky_relu", (x,), lambda g: (g * (slope + (1.0 - slope) * pos),))


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, "sum", (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    """Average pooling over ``axis`` (all axes when None)."""
    x = _lift(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _node(out, "mean", (x,), backward)


def masked_softmax(x, mask, axis: int = -1) -> Tensor:
    """Softmax whose normalization runs only over entries where ``mask`` is true.

    Masked-out positions get probability exactly 0. Every slice along
    ``axis`` must contain at least one unmasked entry.
    """
    x = _lift(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=axis).all():
        raise ShapeError("masked_softmax", "a row has an empty index set")
    shifted = np.where(mask, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    ex = np.where(mask, np.exp(shifted), 0.0)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, "masked_softmax", (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    return masked_softmax(x, np.ones(_lift(x).shape, dtype=bool), axis=axis)


# ---------------------------------------------------------------- segments
#
# A segmentation splits one axis into contiguous, non-empty runs given by
# their start offsets. This is the sparse form of a masked index set: run i
# holds the entries of row i that the mask keeps.

def _segment_lengths(starts: np.ndarray, total: int) -> np.ndarray:
    return np.diff(np.append(starts, total))


def segment_sum(x, starts: np.ndarray, axis: int = -1) -> Tensor:
    x = _lift(x)
    starts = np.asarray(starts)
    lengths = _segment_lengths(starts, x.shape[axis])
    if np.any(lengths <= 0):
        raise ShapeError("segment_sum", "segments must be non-empty")
    out = np.add.reduceat(x.data, starts, axis=axis)
    return _node(out, "segment_sum", (x,), lambda g: (np.repeat(g, lengths, axis=axis),))


def segment_softmax(x, starts: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax normalized separately within each segment along ``axis``."""
    x = _lift(x)
    starts = np.asarray(starts)
    lengths = _segment_lengths(starts, x.shape[axis])
    if np.any(lengths <= 0):
        raise ShapeError("segment_softmax", "segments must be non-empty")
    peak = np.repeat(np.maximum.reduceat(x.data, starts, axis=axis), lengths, axis=axis)
    ex = np.exp(x.data - peak)
    out = ex / np.repeat(np.add.reduceat(ex, starts, axis=axis), lengths, axis=axis)

    def backward(g):
        inner = np.repeat(np.add.reduceat(g * out, starts, axis=axis), lengths, axis=axis)
        return (out * (g - inner),)

    return _node(out, "segment_softmax", (x,), backward)


def take(x, index: np.ndarray, axis: int = -1) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate on backward."""
    x = _lift(x)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, index, axis=axis)
    order = np.argsort(index, kind="stable")
    targets, first = np.unique(index[order], return_index=True)
    extent = x.shape[axis]

    def backward(g):
        summed = np.add.reduceat(np.take(g, order, axis=axis), first, axis=axis)
        gx = np.zeros(x.shape, dtype=DTYPE)
        sl = [slice(None)] * x.ndim
        sl[axis] = targets
        gx[tuple(sl)] = summed
        return (gx,)

    if index.size and (index.min() < -extent or index.max() >= extent):
        raise ShapeError("take", f"index out of range for extent {extent}")
    return _node(out, "take", (x,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product following numpy.matmul broadcasting (ndim >= 2)."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", f"batch extents differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else unbroadcast(ga, a.shape),
                None if gb is None else unbroadcast(gb, b.shape))

    return _node(out, "matmul", (a, b), backward)


def conv2d(x, kernel, stride: tuple[int, int] = (1, 1)) -> Tensor:
    """Valid 2-D cross-correlation.

    ``x`` has shape (..., H, W) and ``kernel`` (C, kh, kw); the result has
    shape (..., C, Ho, Wo) with Ho = (H - kh) // sh + 1 and likewise Wo.
    """
    x, kernel = _lift(x), _lift(kernel)
    if x.ndim < 2 or kernel.ndim != 3:
        raise ShapeError("conv2d", f"bad operand ranks {x.shape}, {kernel.shape}")
    H, W = x.shape[-2:]
    C, kh, kw = kernel.shape
    sh, sw = stride
    if kh > H or kw > W:
        raise ShapeError("conv2d", f"kernel {kernel.shape[1:]} larger than input {(H, W)}")
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(-2, -1))
    win = win[..., ::sh, ::sw, :, :][..., :Ho, :Wo, :, :]
    out = np.einsum("...ijab,cab->...cij", win, kernel.data)

    def backward(g):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.tensordot(g.reshape(-1, C, Ho, Wo), win.reshape(-1, Ho, Wo, kh, kw),
                              axes=([0, 2, 3], [0, 1, 2]))
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=DTYPE)
            for p in range(kh):
                for q in range(kw):
                    contrib = np.einsum("...cij,c->...ij", g, kernel.data[:, p, q])
                    gx[..., p:p + sh * (Ho - 1) + 1:sh, q:q + sw * (Wo - 1) + 1:sw] += contrib
        return gx, gk

    return _node(out, "conv2d", (x, kernel), backward)


# ---------------------------------------------------------------- structure

def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _lift(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2) if x.ndim >= 2 else (0,)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), "transpose", (x,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _lift(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _node(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, idx) -> Tensor:
    x = _lift(x)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        if _is_basic_index(idx):
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, "getitem", (x,), backward)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, "concat", tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("stack", str(exc)) from None
    n = len(tensors)
    return _node(out, "stack", tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------- backward

def topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | Mapping[str, Tensor]):
    """Adjoints of a scalar ``root`` with respect to ``leaves``.

    Returns a dict keyed like ``leaves`` (names for a mapping, the tensors
    themselves for an iterable). Fan-out contributions are summed; leaves not
    reached by the graph get zero gradients.
    """
    if root.data.size != 1:
        raise ShapeError("backward", f"root must be scalar, got shape {root.shape}")
    if isinstance(leaves, Mapping):
        keyed = dict(leaves)
    else:
        keyed = {t: t for t in leaves}

    adjoint: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=DTYPE)}
    if root.requires_grad:
        for node in reversed(topological_order(root)):
            g = adjoint.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg
    return {k: adjoint.get(id(t), np.zeros(t.shape, dtype=DTYPE)) for k, t in keyed.items()}


# ---------------------------------------------------------------- checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_gradients(params: Mapping[str, np.ndarray], loss_fn: Callable[[dict], Tensor],
                    eps: float = 1e-5, tol: float = 1e-4, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare ``backward`` against central finite differences.

    ``loss_fn`` receives a dict of parameter tensors and returns a scalar
    tensor. With ``max_entries`` set, that many randomly chosen entries per
    parameter are probed instead of every entry.
    """
    if eps <= 0 or tol <= 0:
        raise ValueError("eps and tol must be positive")
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    leaves = {k: parameter(v, name=k) for k, v in base.items()}
    analytic = backward(loss_fn(leaves), leaves)

    def loss_at(name, flat_idx, delta):
        probe = dict(base)
        arr = base[name].copy()
        arr.flat[flat_idx] += delta
        probe[name] = arr
        return float(loss_fn({k: constant(v) for k, v in probe.items()}).data)

    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    for name, arr in base.items():
        indices = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            indices = rng.choice(arr.size, size=max_entries, replace=False)
        worst = 0.0
        for i in indices:
            numeric = (loss_at(name, i, eps) - loss_at(name, i, -eps)) / (2 * eps)
            err = float(relative_error(analytic[name].flat[i], numeric))
            worst = max(worst, err)
            report.checked += 1
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
