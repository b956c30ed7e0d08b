"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything here operates on plain numpy arrays wrapped in :class:`Tensor`.
Graphs are built eagerly during the forward pass and walked once, in reverse
topological order, by :meth:`Tensor.backward`. Leaves with ``requires_grad``
accumulate into ``.grad`` so that several backward calls (e.g. scenes in a
batch) sum their contributions.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    """Raised when a softmax row has every column masked out."""


class EvaluationError(ValueError):
    """Raised when a forward evaluation produces non-finite values."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- autograd ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        # iterative topological sort (graphs can exceed the recursion limit)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate persistently
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise and structural ops -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                          _unbroadcast(g * a.data, b.data.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul expects compatible 2-D operands, got {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    return _node(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over a leading batch axis: (B,n,k) @ (B,k,m)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm expects 3-D operands, got {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    return _node(data, (a, b), lambda g: (g @ b.data.transpose(0, 2, 1),
                                          a.data.transpose(0, 2, 1) @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _node(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated stably."""
    data = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _node(data, (a,), lambda g: (g * sig,))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / n,)

    return _node(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    return _node(data, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(data, (a,), lambda g: (g.transpose(inv),))


def take(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(data, (a,), backward)


def take_flat(a: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; used for im2col patch extraction."""
    data = a.data.reshape(-1)[flat_idx]

    def backward(g):
        full = np.zeros(a.data.size)
        np.add.at(full, flat_idx.reshape(-1), g.reshape(-1))
        return (full.reshape(a.data.shape),)

    return _node(data, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _node(data, tuple(tensors), backward)


def segment_mean(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Mean-pool rows of a into num_segments groups given per-row segment ids."""
    if a.data.shape[0] != segment_ids.shape[0]:
        raise ShapeError(
            f"segment_mean: {a.data.shape[0]} rows but {segment_ids.shape[0]} segment ids")
    counts = np.bincount(segment_ids, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ShapeError("segment_mean: empty segment")
    sums = np.zeros((num_segments,) + a.data.shape[1:])
    np.add.at(sums, segment_ids, a.data)
    inv = (1.0 / counts).reshape((num_segments,) + (1,) * (a.data.ndim - 1))

    def backward(g):
        return ((g * inv)[segment_ids],)

    return _node(sums * inv, (a,), backward)


def softmax_rows(m: Tensor, column_mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with numerically stable max subtraction.

    column_mask, when given, is boolean with True marking a masked (excluded)
    column; masked columns get weight exactly 0. Raising every column of a
    row by the same constant leaves the output unchanged.
    """
    m = _wrap(m)
    if not np.all(np.isfinite(m.data)):
        raise EvaluationError("softmax_rows: non-finite logits")
    logits = m.data
    if column_mask is not None:
        column_mask = np.asarray(column_mask, dtype=bool)
        if column_mask.all():
            raise DegenerateMaskError("softmax_rows: all columns masked")
        logits = np.where(column_mask, -np.inf, logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _node(p, (m,), backward)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = xhat * gain.data + bias.data
    d = x.data.shape[-1]

    def backward(g):
        dxhat = g * gain.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _node(data, (x, gain, bias), backward)


def logsumexp_rows(x: Tensor) -> Tensor:
    """Stable log-sum-exp along the last axis (the max shift is a constant)."""
    shift = x.data.max(axis=-1, keepdims=True)
    inner = log(tsum(exp(x - Tensor(shift)), axis=-1))
    return inner + Tensor(shift[..., 0])


# -- initialization ------------------------------------------------------------


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], requires_grad on."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# -- finite-difference verification --------------------------------------------


@dataclass
class GradcheckResult:
    max_rel_error: float
    passed: bool
    tol: float
    n_checked: int

    def __bool__(self):
        return self.passed


def gradcheck(fn, inputs, eps: float = 1e-5, tol: float = 1e-4) -> GradcheckResult:
    """Compare the reverse-mode gradient of a scalar function to central
    finite differences, elementwise over every input with requires_grad.

    The relative error denominator is floored at 1e-8 so exactly-zero
    gradients compare cleanly.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    if out.data.size != 1:
        raise ShapeError("gradcheck: function must return a scalar")
    if not np.isfinite(out.data).all():
        raise EvaluationError("gradcheck: non-finite forward value")
    out.backward()

    max_rel = 0.0
    n_checked = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = float(fn(*inputs).data.ravel()[0])
            flat[i] = orig - eps
            with no_grad():
                f_minus = float(fn(*inputs).data.ravel()[0])
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(fd), 1e-8)
            max_rel = max(max_rel, abs(aflat[i] - fd) / denom)
            n_checked += 1
    return GradcheckResult(max_rel_error=max_rel, passed=max_rel <= tol,
                           tol=tol, n_checked=n_checked)
