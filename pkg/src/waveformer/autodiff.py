"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor requiring gradients records a node
(an op tag, its parent tensors and a backward closure).  Nodes carry a
global construction sequence number, so ``backward`` can walk the graph in
exact reverse construction order without keeping a global tape alive.

Broadcasting is deliberately narrow: elementwise ops accept identical
shapes or a 1-D operand matching the trailing axis (bias addition), and
``matmul`` accepts identical batch dimensions or one side unbatched.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_sequence = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """An n-dimensional real array that can take part in a computation graph."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        _check_finite(arr, name or "tensor data")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.op: Optional[str] = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.seq = next(_sequence)

    # -- construction -----------------------------------------------------

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str, backward: BackwardFn) -> "Tensor":
        _check_finite(data, f"output of {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        if out.requires_grad:
            out.parents = tuple(parents)
            out._backward = backward
        else:
            out.parents = ()
            out._backward = None
        out.seq = next(_sequence)
        return out

    # -- basic properties -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a1: int, a2: int):
        return swapaxes(self, a1, a2)

    def sum(self, axis: int | None = None):
        return reduce(self, axis, "sum")

    def mean(self, axis: int | None = None):
        return reduce(self, axis, "mean")

    def backward(self) -> "Graph":
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def make_op(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: BackwardFn) -> Tensor:
    """Record a custom differentiable op.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per parent, each shaped like that parent.
    """
    return Tensor._node(data, parents, op, backward)


# -- graph traversal --------------------------------------------------------


@dataclass
class Graph:
    """Recorded ops reachable from ``root``, in construction order."""

    ops: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)
    root: Optional[Tensor] = None


def trace(root: Tensor) -> Graph:
    seen: set[int] = set()
    ops: list[Tensor] = []
    leaves: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        if t._backward is None:
            leaves.append(t)
        else:
            ops.append(t)
            stack.extend(t.parents)
    ops.sort(key=lambda t: t.seq)
    leaves.sort(key=lambda t: t.seq)
    return Graph(ops=ops, leaves=leaves, root=root)


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate across calls; use ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = trace(loss)
    if not loss.requires_grad:
        return graph
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._backward is None:
        _accumulate_leaf(loss, pending.pop(id(loss)))
        return graph
    for node in reversed(graph.ops):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"{node.op} backward produced grad {pg.shape} for parent {parent.shape}"
                )
            if parent._backward is None:
                _accumulate_leaf(parent, pg)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
    return graph


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    _check_finite(g, f"gradient of {leaf.name or 'leaf tensor'}")
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=leaf.data.dtype, copy=True)
    else:
        leaf.grad = leaf.grad + g


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- elementwise --------------------------------------------------------------


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return "b_vec"
    if a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1]:
        return "a_vec"
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if (kind == "b_vec" and side == "b") or (kind == "a_vec" and side == "a"):
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    return g


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Pointwise ``add``, ``sub`` or ``mul`` with trailing-vector broadcasting."""
    bk = _broadcast_kind(a, b, kind)
    if kind == "add":
        out = a.data + b.data

        def bw(g):
            return _reduce_to(g, bk, "a"), _reduce_to(g, bk, "b")

    elif kind == "sub":
        out = a.data - b.data

        def bw(g):
            return _reduce_to(g, bk, "a"), _reduce_to(-g, bk, "b")

    elif kind == "mul":
        out = a.data * b.data

        def bw(g):
            return _reduce_to(g * b.data, bk, "a"), _reduce_to(g * a.data, bk, "b")

    else:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return Tensor._node(out, (a, b), kind, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor._node(x.data * c, (x,), "scale", lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return Tensor._node(x.data + c, (x,), "add_scalar", lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return Tensor._node(np.maximum(x.data, 0), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return Tensor._node(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def _axis(x: Tensor, axis: int) -> int:
    nd = x.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % nd


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(x, axis)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return Tensor._node(out, (x,), "softmax", bw)


def mask_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant.

    ``mask`` must match the trailing axes of ``x``; filled entries get zero
    gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    if x.shape[x.ndim - mask.ndim:] != mask.shape:
        raise DimensionError(f"mask_fill: mask {mask.shape} does not match trailing axes of {x.shape}")
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return Tensor._node(out, (x,), "mask_fill", lambda g: (np.where(mask, 0, g).astype(g.dtype),))


# -- reductions ------------------------------------------------------------------


def reduce(x: Tensor, axis: int | None, kind: str) -> Tensor:
    """Reduce along one axis (or all axes when ``axis`` is None), dropping it."""
    if axis is None:
        flat = reshape(x, (x.size,))
        return reduce(flat, 0, kind)
    ax = _axis(x, axis)
    n = x.shape[ax]
    if kind == "sum":
        out = x.data.sum(axis=ax)

        def bw(g):
            return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    elif kind == "mean":
        out = x.data.mean(axis=ax)

        def bw(g):
            return (np.broadcast_to(np.expand_dims(g / n, ax), x.shape).copy(),)

    elif kind == "max":
        # np.argmax returns the first maximum, i.e. ties go to the lowest index
        idx = np.expand_dims(x.data.argmax(axis=ax), ax)
        out = np.take_along_axis(x.data, idx, axis=ax).squeeze(ax)

        def bw(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx, np.expand_dims(g, ax), axis=ax)
            return (gx,)

    else:
        raise ContractError(f"unknown reduction {kind!r}")
    return Tensor._node(np.asarray(out), (x,), f"reduce_{kind}", bw)


# -- matrix product --------------------------------------------------------------


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # a stacked operand against a plain matrix is one large GEMM
    if y.ndim == 2 and x.ndim > 2:
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
    return x @ y


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``.

    Batch dimensions must agree exactly, or one operand must be a plain
    matrix shared across the other's batch.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    out = _mm(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _mm(g, np.swapaxes(b.data, -1, -2))
            if a.ndim == 2 and ga.ndim > 2:
                ga = ga.reshape(-1, *a.shape).sum(axis=0)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                if b.ndim == 2 and gb.ndim > 2:
                    gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return Tensor._node(out, (a, b), "matmul", bw)


# -- shape manipulation --------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return Tensor._node(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    i, j = _axis(x, a1), _axis(x, a2)
    return Tensor._node(np.swapaxes(x.data, i, j), (x,), "swapaxes", lambda g: (np.swapaxes(g, i, j),))


def _check_slice(shape: tuple[int, ...], index) -> tuple:
    if not isinstance(index, tuple):
        index = (index,)
    if len(index) > len(shape):
        raise DimensionError(f"slice {index} has more axes than shape {shape}")
    for ix, n in zip(index, shape):
        if isinstance(ix, slice):
            if ix.step not in (None, 1):
                raise ContractError("only unit-step slices are supported")
            for bound in (ix.start, ix.stop):
                if bound is not None and not -n <= bound <= n:
                    raise DimensionError(f"slice bound {bound} outside axis of length {n}")
        elif isinstance(ix, (int, np.integer)):
            if not -n <= ix < n:
                raise DimensionError(f"index {ix} outside axis of length {n}")
        elif ix is not Ellipsis:
            raise ContractError(f"unsupported index {ix!r}")
    return index


def slice_(x: Tensor, index) -> Tensor:
    """Basic (unit-step) slicing; backward scatters into zeros."""
    index = _check_slice(x.shape, index)
    out = x.data[index]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return Tensor._node(np.array(out), (x,), "slice", bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ContractError("concat needs at least one tensor")
    ax = _axis(parts[0], axis)
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:ax] + p.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise DimensionError(f"concat: {p.shape} incompatible with {ref} on axis {ax}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def bw(g):
        return tuple(np.take(g, range(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._node(out, tuple(parts), "concat", bw)

