"""Reverse-mode automatic differentiation over float32 numpy arrays.

The engine is a classic tape-free design: every operation returns a new
``Tensor`` holding references to its inputs and a closure that maps the
output gradient to input gradients.  ``backward`` topologically sorts the
recorded graph from the loss and visits each node exactly once in reverse
order.

Contracts:
  * all values and gradients are float32;
  * gradients accumulate across ``backward`` calls until ``zero_grads``;
  * no broadcasting except a smaller operand whose shape matches the
    trailing dimensions of the larger one (row-wise bias addition and the
    positional-table / mask patterns that reduce to it);
  * graphs are single-threaded; independent graphs share no state.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    """A dense float32 array plus optional gradient and graph linkage."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small conveniences; the module-level functions are the contract.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the graph below ``root``."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

    ``loss`` must be scalar (shape ``()``).  Gradients add onto whatever is
    already stored, so calling twice without ``zero_grads`` doubles them.
    """
    if loss.values.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    if not loss.requires_grad:
        return
    flowing: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float32)}
    for node in reversed(_topo_order(loss)):
        grad = flowing.pop(id(node), None)
        if grad is None:
            continue
        node.grad = grad.copy() if node.grad is None else node.grad + grad
        if node._backward is None:
            continue
        for parent, pgrad in zip(node._parents, node._backward(grad)):
            if pgrad is None or not parent.requires_grad:
                continue
            pgrad = pgrad.astype(np.float32, copy=False)
            key = id(parent)
            flowing[key] = pgrad if key not in flowing else flowing[key] + pgrad


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _check_trailing(a: Tensor, b: Tensor, op: str) -> bool:
    """True if b broadcasts onto a's trailing dims; error if incompatible."""
    if a.shape == b.shape:
        return False
    if b.ndim < a.ndim and b.shape == a.shape[a.ndim - b.ndim:]:
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead else grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    broadcast = _check_trailing(a, b, "add")
    out = a.values + b.values

    def bwd(g):
        return g, _sum_to(g, b.shape) if broadcast else g

    return _node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    broadcast = _check_trailing(a, b, "mul")
    out = a.values * b.values

    def bwd(g):
        ga = g * b.values
        gb = g * a.values
        return ga, _sum_to(gb, b.shape) if broadcast else gb

    return _node(out, (a, b), bwd)


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    return _node(a.values * factor, (a,), lambda g: (g * factor,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires at least 2-d operands")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape[-1]} and {b.shape[-2]} disagree")
    out = a.values @ b.values

    def bwd(g):
        return g @ np.swapaxes(b.values, -1, -2), np.swapaxes(a.values, -1, -2) @ g

    return _node(out, (a, b), bwd)


def gelu(a) -> Tensor:
    """GELU via the tanh approximation (differentiable everywhere)."""
    a = _as_tensor(a)
    x = a.values
    inner = _GELU_K * (x + _GELU_C * x * x * x)
    t = np.tanh(inner)
    out = (0.5 * x * (1.0 + t)).astype(np.float32)

    def bwd(g):
        d_inner = _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * local,)

    return _node(out, (a,), bwd)


def layer_norm(a, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Backward follows the standard per-row reduction: with normalized
    values ``h`` and upstream ``dh = g * gain``,
    ``dx = (dh - mean(dh) - h * mean(dh * h)) / sqrt(var + eps)``.
    """
    a = _as_tensor(a)
    if a.ndim < 1 or a.shape[-1] == 0:
        raise DimensionError("layer_norm requires a non-empty last axis")
    dim = a.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (dim,):
            raise DimensionError(f"layer_norm {name} must have shape ({dim},), got {p.shape}")
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    normed = centered * inv
    out = normed
    if gain is not None:
        out = out * gain.values
    if bias is not None:
        out = out + bias.values
    parents: list[Tensor] = [a]
    if gain is not None:
        parents.append(gain)
    if bias is not None:
        parents.append(bias)

    def bwd(g):
        dh = g * gain.values if gain is not None else g
        mean_dh = dh.mean(axis=-1, keepdims=True)
        mean_dh_h = (dh * normed).mean(axis=-1, keepdims=True)
        dx = (dh - mean_dh - normed * mean_dh_h) * inv
        grads = [dx]
        if gain is not None:
            grads.append((g * normed).reshape(-1, dim).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, dim).sum(axis=0))
        return tuple(grads)

    return _node(out.astype(np.float32), parents, bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    x = a.values
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = (ex / ex.sum(axis=axis, keepdims=True)).astype(np.float32)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _node(out, (a,), bwd)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    if a.ndim < 2:
        raise DimensionError("transpose requires at least 2-d input")
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = np.argsort(axes)
    out = np.transpose(a.values, axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    if int(np.prod(shape)) != a.values.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    original = a.shape
    return _node(a.values.reshape(shape), (a,), lambda g: (g.reshape(original),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base):
            raise DimensionError("concat: rank mismatch")
        if base[:axis] + base[axis + 1:] != other[:axis] + other[axis + 1:]:
            raise DimensionError("concat: off-axis shapes differ")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.values for p in parts], axis=axis)

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node(out, parts, bwd)


def slice_rows(a, start: int, stop: int) -> Tensor:
    """Slice rows (axis -2) of a stack of matrices."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise DimensionError("slice_rows requires at least 2-d input")
    rows = a.shape[-2]
    if not (0 <= start < stop <= rows):
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {rows} rows")
    index = (Ellipsis, slice(start, stop), slice(None))
    out = a.values[index].copy()
    full_shape = a.shape

    def bwd(g):
        full = np.zeros(full_shape, dtype=np.float32)
        full[index] = g
        return (full,)

    return _node(out, (a,), bwd)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    if a.values.size == 0:
        raise DimensionError("mean of an empty tensor")
    n = a.values.size
    out = np.float32(a.values.mean())
    shape = a.shape
    return _node(np.asarray(out), (a,), lambda g: (np.full(shape, g / n, dtype=np.float32),))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(np.float32(a.values.sum()))
    shape = a.shape
    return _node(out, (a,), lambda g: (np.full(shape, g, dtype=np.float32),))


def expand_batch(a, batch: int) -> Tensor:
    """Stack ``batch`` copies of ``a`` along a new leading axis."""
    a = _as_tensor(a)
    if batch <= 0:
        raise DimensionError("expand_batch requires batch >= 1")
    out = np.broadcast_to(a.values, (batch,) + a.shape).copy()
    return _node(out, (a,), lambda g: (g.sum(axis=0),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax(logits) against soft labels.

    ``labels`` rows are probability vectors (one-hot or mixed); the loss is
    linear in them, which is what makes mixed-label training well posed.
    """
    logits, labels = _as_tensor(logits), _as_tensor(labels)
    if logits.ndim != 2 or labels.ndim != 2 or logits.shape != labels.shape:
        raise DimensionError(
            f"cross_entropy expects matching (batch, classes) inputs, got {logits.shape} vs {labels.shape}")
    batch = logits.shape[0]
    if batch == 0:
        raise DimensionError("cross_entropy on an empty batch")
    x = logits.values
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    out = np.asarray(np.float32(-(labels.values * logp).sum() / batch))
    probs = np.exp(logp)

    def bwd(g):
        glogits = g * (probs * labels.values.sum(axis=1, keepdims=True) - labels.values) / batch
        glabels = g * (-logp) / batch if labels.requires_grad else None
        return glogits, glabels

    return _node(out, (logits, labels), bwd)
