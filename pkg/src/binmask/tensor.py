"""A small deterministic reverse-mode autodiff engine over numpy arrays.

Tensors record the primitive that produced them; :func:`backward` collects the
graph reachable from a scalar loss, orders it by creation sequence and replays
the backward rules in exact reverse execution order. Only leaves (and tensors
marked with :meth:`Tensor.retain_grad`) keep their gradients, and gradients
accumulate until :meth:`Tensor.zero_grad` is called.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels as K

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block (evaluation only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised by health checks when a tensor holds NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_retain")

    def __init__(self, data, requires_grad=False, dtype=np.float32, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_seq)
        self._retain = False

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._seq = next(_seq)
        out._retain = False
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def retain_grad(self):
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {self.name or self.shape}")
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise NonFiniteError(f"non-finite gradient in tensor {self.name or self.shape}")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def _lift(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a, b, what):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{what}: shapes {a} and {b} are not broadcastable") from None


# --------------------------------------------------------------------------
# tape / backward
# --------------------------------------------------------------------------

@dataclass
class Tape:
    """Nodes reachable from a loss, in execution order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t._seq))

    def replay_backward(self, loss: Tensor):
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor):
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_loss(loss).replay_backward(loss)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims must be equal or 1 (missing counts as 1)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    n = max(len(lead_a), len(lead_b))
    pa = (1,) * (n - len(lead_a)) + lead_a
    pb = (1,) * (n - len(lead_b)) + lead_b
    for x, y in zip(pa, pb):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = np.matmul(A, B)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape)
        if b.requires_grad:
            if B.ndim == 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return Tensor._from_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "hadamard")
    A, B = a.data, b.data
    out = A * B
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape))
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1 - y * y),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    X = x.data
    y, cdf = K.gelu(X)
    return Tensor._from_op(y, (x,), lambda g: (K.gelu_bwd(X, cdf, g),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.data.ndim if x.data.ndim else 0
    moved = np.moveaxis(x.data, ax, -1)
    y = K.softmax_lastdim(moved)

    def bw(g):
        gm = np.moveaxis(g, ax, -1)
        return (np.moveaxis(K.softmax_lastdim_bwd(y, gm), -1, ax),)

    return Tensor._from_op(np.moveaxis(y, -1, ax), (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must be ({d},), got {gain.shape} and {bias.shape}")
    y, xhat, rstd = K.layer_norm_lastdim(x.data, gain.data, bias.data, eps)

    def bw(g):
        gx, gg, gb = K.layer_norm_lastdim_bwd(g, xhat, rstd, gain.data)
        return gx, gg, gb

    return Tensor._from_op(y, (x, gain, bias), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    bad = np.argwhere((ids < 0) | (ids >= vocab))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise IndexError(f"id {int(ids[pos])} at position {pos} outside vocabulary of size {vocab}")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._from_op(out, (table,), bw)


def cross_entropy(logits: Tensor, labels, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood of ``labels`` over the non-ignored positions."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    keep = labels != ignore_index
    if np.any((labels[keep] < 0) | (labels[keep] >= k)):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data.reshape(-1, k)
    lab = labels.reshape(-1)
    kv = keep.reshape(-1)
    count = int(kv.sum())
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    safe = np.where(kv, lab, 0)
    nll = lse - zs[np.arange(len(lab)), safe]
    total = nll[kv].sum(dtype=np.float64)
    loss = np.asarray(total / count if count else 0.0, dtype=logits.dtype)

    def bw(g):
        if not count:
            return (np.zeros_like(logits.data),)
        p = np.exp(zs - lse[:, None])
        p[np.arange(len(lab)), safe] -= 1
        p *= kv[:, None]
        return ((p * (g / count)).astype(logits.dtype).reshape(logits.shape),)

    return Tensor._from_op(loss, (logits,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    src = x.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        full[idx] += g
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(x.data[idx]), (x,), bw)


def tsum(x: Tensor) -> Tensor:
    src = x.shape
    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return scale(tsum(x), 1.0 / n)


def stack_weighted(tensors: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """``sum_i weights[i] * tensors[i]`` accumulated left to right."""
    acc = scale(tensors[0], weights[0])
    for t, w in zip(tensors[1:], weights[1:]):
        acc = add(acc, scale(t, w))
    return acc


def check_finite(tensors, names=None):
    for i, t in enumerate(tensors):
        if not np.all(np.isfinite(t.data)):
            label = names[i] if names else (t.name or str(i))
            raise NonFiniteError(f"non-finite values in tensor {label}")


def numerical_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f`` wrt ``arr`` (mutated in place, then restored)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * step)
    return g


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0 or math.isclose(denom, 0.0):
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
