"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a row-major numpy array of 64-bit floats.  Operations build a
directed acyclic graph; calling ``backward`` on a scalar root walks the graph
in reverse topological order and accumulates gradients additively, so fan-out
(a tensor consumed by several ops) just sums the incoming contributions.

Broadcasting is supported exactly as far as the encoder needs it: trailing-axis
bias adds, leading batch axes in matmul, and scalar scaling.  Gradients of
broadcast operands are summed back down to the operand's own shape.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

from .errors import EmptyPoolError, RankError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (used for frozen forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy-backed value that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Backpropagate from this scalar; leaf ``grad`` fields receive d(self)/d(leaf)."""
        if self.data.size != 1:
            raise RankError(f"backward requires a scalar root, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(()))

    # -- graph-building helpers -------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward(out)
        return out

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        data = self.data + other.data

        def backward(out):
            def run():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad, other.data.shape))
            return run

        return self._make(data, (self, other), backward)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        data = self.data * other.data

        def backward(out):
            def run():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad * self.data, other.data.shape))
            return run

        return self._make(data, (self, other), backward)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        data = -self.data

        def backward(out):
            def run():
                if self.requires_grad:
                    self._accumulate(-out.grad)
            return run

        return self._make(data, (self,), backward)

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __matmul__(self, other) -> "Tensor":
        other = self._coerce(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise RankError(
                f"matmul requires rank >= 2 operands, got {self.data.shape} and {other.data.shape}"
            )
        if self.data.shape[-1] != other.data.shape[-2]:
            raise ShapeError(
                f"matmul inner dimensions disagree: {self.data.shape} @ {other.data.shape}"
            )
        data = self.data @ other.data

        def backward(out):
            def run():
                if self.requires_grad:
                    ga = out.grad @ other.data.swapaxes(-1, -2)
                    self._accumulate(_unbroadcast(ga, self.data.shape))
                if other.requires_grad:
                    gb = self.data.swapaxes(-1, -2) @ out.grad
                    other._accumulate(_unbroadcast(gb, other.data.shape))
            return run

        return self._make(data, (self, other), backward)

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def backward(out):
            def run():
                if self.requires_grad:
                    self._accumulate(out.grad.reshape(self.data.shape))
            return run

        return self._make(data, (self,), backward)

    def transpose(self, *axes: int) -> "Tensor":
        data = self.data.transpose(axes)
        inverse = np.argsort(axes)

        def backward(out):
            def run():
                if self.requires_grad:
                    self._accumulate(out.grad.transpose(inverse))
            return run

        return self._make(data, (self,), backward)

    def __getitem__(self, index) -> "Tensor":
        data = self.data[index]

        def backward(out):
            def run():
                if self.requires_grad:
                    buf = np.zeros_like(self.data)
                    np.add.at(buf, index, out.grad)
                    self._accumulate(buf)
            return run

        return self._make(data, (self,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(out):
            def run():
                if self.requires_grad:
                    g = out.grad
                    if axis is not None and not keepdims:
                        g = np.expand_dims(g, axis)
                    self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            return run

        return self._make(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


# -- elementwise nonlinearities -----------------------------------------------


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(out):
        def run():
            if x.requires_grad:
                x._accumulate(out.grad * data)
        return run

    return Tensor._make(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(out):
        def run():
            if x.requires_grad:
                x._accumulate(out.grad / x.data)
        return run

    return Tensor._make(data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def backward(out):
        def run():
            if x.requires_grad:
                x._accumulate(out.grad * (1.0 - data * data))
        return run

    return Tensor._make(data, (x,), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def backward(out):
        def run():
            if x.requires_grad:
                pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
                x._accumulate(out.grad * (cdf + x.data * pdf))
        return run

    return Tensor._make(data, (x,), backward)


# -- normalized maps -----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax along ``axis``; never overflows for finite inputs."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(out):
        def run():
            if x.requires_grad:
                inner = (out.grad * data).sum(axis=axis, keepdims=True)
                x._accumulate(data * (out.grad - inner))
        return run

    return Tensor._make(data, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """log(softmax(x)) computed via a shifted log-sum-exp."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(out):
        def run():
            if x.requires_grad:
                total = out.grad.sum(axis=axis, keepdims=True)
                x._accumulate(out.grad - np.exp(data) * total)
        return run

    return Tensor._make(data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data
    reduce_axes = tuple(range(x.data.ndim - 1))

    def backward(out):
        def run():
            if x.requires_grad:
                dxhat = out.grad * gain.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(inv * (dxhat - m1 - xhat * m2))
            if gain.requires_grad:
                gain._accumulate((out.grad * xhat).sum(axis=reduce_axes))
            if bias.requires_grad:
                bias._accumulate(out.grad.sum(axis=reduce_axes))
        return run

    return Tensor._make(data, (x, gain, bias), backward)


# -- composite operations used by the encoder and losses -----------------------


def masked_mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the rows of ``x`` selected by a binary mask.

    ``x`` is [T x d] with mask [T], or [B x T x d] with mask [B x T].  Each
    selected row contributes 1/|active| to the pooled gradient.  A mask that
    selects nothing (any batch row with no active position) is an error.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.data.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} does not match rows of {x.data.shape}")
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise EmptyPoolError("mask selects no positions to pool")
    weights = mask / counts[..., None]
    return (x * Tensor(weights[..., None])).sum(axis=-2)


def weighted_cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """-(1/B) * sum_i weights[i] * log softmax(logits[i])[targets[i]].

    The normalizer is the batch size, not the weight sum, so weights scale the
    loss linearly.  Targets must index valid columns and weights must be >= 0.
    """
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)
    b, c = logits.data.shape
    if targets.shape != (b,) or weights.shape != (b,):
        raise ShapeError(
            f"targets {targets.shape} and weights {weights.shape} must both be ({b},)"
        )
    if np.any(targets < 0) or np.any(targets >= c):
        raise IndexError(f"target labels must lie in [0, {c})")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    picked = log_softmax(logits, axis=-1)[np.arange(b), targets]
    return (picked * Tensor(weights)).sum() * (-1.0 / b)


def grad_reverse(x: Tensor, scale: float = 1.0) -> Tensor:
    """Identity in the forward pass; multiplies the gradient by -scale going back."""
    data = x.data.copy()

    def backward(out):
        def run():
            if x.requires_grad:
                x._accumulate(-scale * out.grad)
        return run

    return Tensor._make(data, (x,), backward)
