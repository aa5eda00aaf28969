"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every operation returns a new :class:`Tensor` that remembers
its parents and a closure which routes the incoming gradient to them.
``Tensor.backward()`` runs the closures in reverse topological order.

Conventions:
  * arrays are float32 by default, float64 in verification mode;
    every op preserves the dtype of its operands,
  * binary ops broadcast like numpy; gradients are summed back over the
    broadcast axes,
  * ops build no graph when none of the inputs requires a gradient or
    inside a :func:`no_grad` block, so frozen subgraphs cost nothing.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple = ()
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing --------------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Backpropagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------------

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
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(as_tensor(other), -1.0))

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap both operands; Python numbers adopt the tensor operand's dtype
    so float32 graphs are not silently upcast by scalar constants."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        dt = a.data.dtype if np.issubdtype(a.data.dtype, np.floating) else None
        return a, Tensor(np.asarray(b, dtype=dt))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        dt = b.data.dtype if np.issubdtype(b.data.dtype, np.floating) else None
        return Tensor(np.asarray(a, dtype=dt)), b
    return as_tensor(a), as_tensor(b)


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _make(data, parents, backward) -> Tensor:
    """Wrap an op result; attach the tape node only when gradients can flow."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- primitive operations ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    data = a.data**exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading batch axes broadcast like numpy."""
    a, b = as_tensor(a), as_tensor(b)
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.shape))
        b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / data)

    return _make(data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        a._accumulate(g * (cdf + x * pdf))

    return _make(data, (a,), backward)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    data = np.maximum(a.data, floor)

    def backward(g):
        a._accumulate(g * (a.data > floor))

    return _make(data, (a,), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Max along one axis; the gradient is routed to the first argmax."""
    a = as_tensor(a)
    if axis is None:
        raise ValueError("tmax requires an explicit axis")
    data = a.data.max(axis=axis, keepdims=keepdims)
    idx = a.data.argmax(axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        mask = np.zeros_like(a.data)
        np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
        a._accumulate(mask * g)

    return _make(data, (a,), backward)


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)

    def backward(g):
        inv = None if axes is None else np.argsort(axes)
        a._accumulate(np.transpose(g, inv))

    return _make(data, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _make(data, tuple(tensors), backward)


def take(a, idx) -> Tensor:
    """Numpy-style indexing; the backward pass scatters with np.add.at."""
    a = as_tensor(a)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - dot))

    return _make(data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))


# -- kernel-backed operations ---------------------------------------------------
# forward/backward pairs live in conceptmix.kernels (compiled or numpy fallback)


def dwconv3x3(x, weight, bias) -> Tensor:
    """Depthwise 3x3 convolution, zero padded, stride 1.

    x: (B, H, W, C), weight: (C, 3, 3), bias: (C,) -> (B, H, W, C)
    """
    from . import kernels

    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    data = kernels.dwconv3x3_forward(x.data, weight.data, bias.data)

    def backward(g):
        gx, gw, gb = kernels.dwconv3x3_backward(g, x.data, weight.data)
        x._accumulate(gx)
        weight._accumulate(gw)
        bias._accumulate(gb)

    return _make(data, (x, weight, bias), backward)


def gate_filter(gates, cutoff) -> Tensor:
    """Piecewise importance: gates - cutoff where gates >= cutoff, else 0.

    gates: (..., E), cutoff: (..., 1). The boundary gates == cutoff sits on
    the active branch, so its derivative is the active one.
    """
    from . import kernels

    gates, cutoff = as_tensor(gates), as_tensor(cutoff)
    data, active = kernels.gate_filter_forward(gates.data, cutoff.data)

    def backward(g):
        ggate, gcut = kernels.gate_filter_backward(g, active)
        gates._accumulate(ggate)
        cutoff._accumulate(_unbroadcast(gcut, cutoff.shape))

    return _make(data, (gates, cutoff), backward)


def importance_normalize(imp) -> Tensor:
    """Normalize importances to combination weights along the last axis.

    Positions whose importances sum to zero get all-zero weights (and pass
    no gradient), which is the documented fallback for an empty expert set.
    """
    from . import kernels

    imp = as_tensor(imp)
    data, denom = kernels.importance_normalize_forward(imp.data)

    def backward(g):
        imp._accumulate(kernels.importance_normalize_backward(g, data, denom))

    return _make(data, (imp,), backward)


# -- composite helpers -----------------------------------------------------------


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T (+ bias); weight is (out, in) so shapes read like maps."""
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out


def l2_norm(x, axis: int = -1, floor: float = 1e-12) -> Tensor:
    """Euclidean norm along an axis, clamped away from zero."""
    return clamp_min(sqrt(tsum(mul(x, x), axis=axis, keepdims=True)), floor)


def layer_norm(x, gain, offset, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize over ``axis`` to zero mean / unit variance, then affine."""
    mu = tmean(x, axis=axis, keepdims=True)
    centered = x - mu
    var = tmean(mul(centered, centered), axis=axis, keepdims=True)
    normed = centered * power(add(var, eps), -0.5)
    return add(mul(normed, gain), offset)


def cosine_rows(a, b, floor: float = 1e-12) -> Tensor:
    """Pairwise cosine similarity between rows: (..., n, d) x (m, d) -> (..., n, m)."""
    num = matmul(a, transpose(b))
    na = l2_norm(a, axis=-1, floor=floor)
    nb = reshape(l2_norm(b, axis=-1, floor=floor), (1, b.shape[0]))
    return num / (na * nb)
