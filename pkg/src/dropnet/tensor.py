"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a local gradient rule on the output node.  :func:`backward`
linearises the recorded graph into a :class:`Tape` (topological order) and
replays the rules in reverse.

Batched layouts follow numpy conventions: sequences are ``[batch, time,
features]`` and masks are plain numpy arrays (1 = valid, 0 = padding).
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateMaskError, DimensionError

DTYPE = np.float64

_recording = contextvars.ContextVar("dropnet_recording", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=DTYPE)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce("mean", self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    needs = _recording.get() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    records: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.records if t.is_leaf]


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` of every tensor that ``loss`` depends on.

    Leaf gradients accumulate across calls; interior nodes are overwritten.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss._grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return Tape([loss])
    tape = Tape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    # buffers created here may be summed into in place; rule outputs may alias
    owned: set[int] = set()
    for node in reversed(tape.records):
        g = pending.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        if node.is_leaf:
            if node is not loss:
                node._grad = g.copy() if node._grad is None else node._grad + g
            continue
        node._grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key not in pending:
                pending[key] = pg
            elif key in owned:
                pending[key] += pg
            else:
                pending[key] = pending[key] + pg
                owned.add(key)
    return tape


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), rule)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# Pointwise nonlinearities
# ---------------------------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped below first.

    Clamped positions receive zero gradient.
    """
    x = a.data
    if floor is not None:
        live = x > floor
        x = np.where(live, x, floor)
        return _make(np.log(x), (a,), lambda g: (np.where(live, g / x, 0.0),))
    return _make(np.log(x), (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules; both operands need ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    # batched activations times a shared matrix: one GEMM over flattened rows
    shared = b.ndim == 2 and a.ndim > 2
    try:
        if shared:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def rule(g):
        ga = gb = None
        if shared:
            if a.requires_grad:
                ga = g @ b.data.T
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), rule)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            return a
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {src} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),))


def _has_advanced(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in parts)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    advanced = _has_advanced(key)

    def rule(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _make(np.array(out, dtype=DTYPE, copy=True), (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ax = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(tensors), rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"stack: incompatible shapes {shapes}") from None
    ax = axis % out.ndim

    def rule(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(out, tuple(tensors), rule)


def lookup(table: Tensor, indices, padding_idx: int | None = None) -> Tensor:
    """Gather rows of ``table``; the gradient scatter-adds back into rows.

    Rows equal to ``padding_idx`` never receive gradient.
    """
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError(f"lookup indices must be integers, got dtype {idx.dtype}")
    if table.ndim != 2:
        raise DimensionError(f"lookup table must be 2-D, got shape {table.shape}")
    vocab = table.shape[0]
    bad = (idx < 0) | (idx >= vocab)
    if bad.any():
        raise IndexError(f"lookup index {int(idx[bad].reshape(-1)[0])} out of range [0, {vocab})")

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        if padding_idx is not None:
            full[padding_idx] = 0.0
        return (full,)

    return _make(table.data[idx], (table,), rule)


# ---------------------------------------------------------------------------
# Masked softmax and reductions
# ---------------------------------------------------------------------------


def _valid(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask).astype(bool)
    try:
        return np.broadcast_to(m, shape)
    except ValueError:
        raise DimensionError(f"mask of shape {m.shape} does not broadcast to {shape}") from None


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; masked positions are left out of the normaliser.

    Raises :class:`DegenerateMaskError` if any slice has no valid position.
    """
    x = a.data
    valid = _valid(mask, x.shape)
    if valid is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        if not valid.any(axis=axis).all():
            raise DegenerateMaskError("softmax: a slice has no valid positions")
        top = np.where(valid, x, -np.inf).max(axis=axis, keepdims=True)
        e = np.exp(np.where(valid, x - top, -np.inf))
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), rule)


def reduce(op: str, a: Tensor, axis=None, mask=None, keepdims: bool = False) -> Tensor:
    """Sum, mean, or max over ``axis`` counting only positions where ``mask`` is set.

    Max routes its whole subgradient to the first maximal position.
    """
    x = a.data
    valid = _valid(mask, x.shape)
    if valid is not None and not valid.any(axis=axis).all():
        raise DegenerateMaskError(f"{op}: a reduced slice has no valid positions")
    axes = tuple(range(x.ndim)) if axis is None else ((axis,) if isinstance(axis, int) else tuple(axis))
    axes = tuple(ax % x.ndim for ax in axes)

    keep_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def expand(g):
        return g.reshape(keep_shape)

    if op in ("sum", "mean"):
        xm = x if valid is None else np.where(valid, x, 0.0)
        total = xm.sum(axis=axes, keepdims=True)
        if op == "mean":
            if valid is None:
                count = np.prod([x.shape[ax] for ax in axes])
            else:
                count = valid.sum(axis=axes, keepdims=True)
            out = total / count
        else:
            count = 1.0
            out = total

        def rule(g):
            gx = np.broadcast_to(expand(g) / count, x.shape)
            if valid is not None:
                gx = np.where(valid, gx, 0.0)
            return (np.array(gx),)

        return _make(out if keepdims else out.squeeze(axis=axes), (a,), rule)

    if op == "max":
        if len(axes) != 1:
            raise ContractError("max reduces over exactly one axis")
        ax = axes[0]
        xm = x if valid is None else np.where(valid, x, -np.inf)
        arg = np.expand_dims(np.argmax(xm, axis=ax), ax)
        out = np.take_along_axis(xm, arg, axis=ax)

        def rule(g):
            gx = np.zeros_like(x)
            np.put_along_axis(gx, arg, expand(g), axis=ax)
            return (gx,)

        return _make(out if keepdims else out.squeeze(axis=ax), (a,), rule)

    raise ContractError(f"unknown reduction {op!r}; expected sum, mean or max")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.is_leaf]
