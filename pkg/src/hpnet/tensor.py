"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array plus the bookkeeping needed to run
backpropagation: the tensors it was computed from and a closure that
routes the incoming gradient to them.  Graphs are built eagerly by the
op functions below and torn down by ordinary garbage collection once
the caller drops its references.

Gradients accumulate (sum) when a tensor feeds several consumers.
Ops skip gradient work for parents with ``requires_grad=False`` and
build no graph at all inside a ``no_grad()`` block.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, GraphError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus the autodiff edges that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable[[], None] | None = None
        self._grad_owned = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    def detach(self) -> "Tensor":
        """Same values, no history."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # First contribution may alias g, so it is never mutated in place
    # until this tensor owns a private buffer.
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[["Tensor"], None]) -> Tensor:
    """Wrap an op result, attaching graph edges only when needed."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = lambda: backward(out)
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar tensor, consuming its graph.

    Gradients land on every reachable tensor with ``requires_grad``.
    Edges are dropped as the walk passes, so a graph supports exactly
    one backward pass.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("backward on a tensor with no graph (requires_grad=False)")

    # Iterative DFS topological order; long unrolled sequences overflow
    # the recursion limit otherwise.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    loss._grad_owned = True
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()
        # Release edges (and any buffers the closure cached) as the walk
        # passes; unrolled sequences would otherwise hold every im2col
        # buffer until the whole backward finished.
        node._backward = None
        node._parents = ()


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(out):
        if a.requires_grad:
            _accumulate(a, out.grad)
        if b.requires_grad:
            _accumulate(b, out.grad)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(out):
        if a.requires_grad:
            _accumulate(a, out.grad)
        if b.requires_grad:
            _accumulate(b, -out.grad)

    return _node(a.data - b.data, (a, b), bwd)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _check_same_shape(a, b, "hadamard")

    def bwd(out):
        if a.requires_grad:
            _accumulate(a, out.grad * b.data)
        if b.requires_grad:
            _accumulate(b, out.grad * a.data)

    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(out):
        if a.requires_grad:
            _accumulate(a, out.grad * s)

    return _node(a.data * s, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(out):
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(out.grad, a.data.shape).copy())

    return _node(np.sum(a.data), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    inv_n = 1.0 / a.data.size

    def bwd(out):
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(out.grad * inv_n, a.data.shape).copy())

    return _node(np.mean(a.data), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(out):
        if a.requires_grad:
            _accumulate(a, out.grad * (a.data > 0.0))

    return _node(out_data, (a,), bwd)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow either side
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_stable(a.data)

    def bwd(out):
        if a.requires_grad:
            _accumulate(a, out.grad * (out_data * (1.0 - out_data)))

    return _node(out_data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(out):
        if a.requires_grad:
            _accumulate(a, out.grad * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bwd)


def satlu(a: Tensor, p_max: float) -> Tensor:
    """Identity below ``p_max``, flat above (gradient zero at the cap)."""
    p_max = float(p_max)
    out_data = np.minimum(a.data, p_max)

    def bwd(out):
        if a.requires_grad:
            _accumulate(a, out.grad * (a.data < p_max))

    return _node(out_data, (a,), bwd)


def concat0(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; trailing dimensions must match."""
    if not tensors:
        raise DimensionError("concat0: empty input")
    tail = tensors[0].data.shape[1:]
    for t in tensors[1:]:
        if t.data.shape[1:] != tail:
            raise DimensionError(
                f"concat0: trailing dims differ, {tensors[0].data.shape} vs {t.data.shape}"
            )
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accumulate(t, out.grad[lo:hi].copy())

    return _node(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), bwd)


def slice0(a: Tensor, lo: int, hi: int) -> Tensor:
    """Slice ``a[lo:hi]`` along axis 0."""
    n = a.data.shape[0]
    if not (0 <= lo <= hi <= n):
        raise DimensionError(f"slice0: range [{lo}:{hi}] invalid for shape {a.data.shape}")

    def bwd(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[lo:hi] = out.grad
            _accumulate(a, g)

    return _node(a.data[lo:hi].copy(), (a,), bwd)


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must map a tensor to a scalar tensor.  Returns the largest
    relative error max|a-n| / max(|a|, |n|, 1e-6) over elements of x.
    """
    x = np.asarray(x, dtype=np.float64)
    t = Tensor(x.copy(), requires_grad=True)
    backward(f(t))
    analytic = np.zeros_like(x) if t.grad is None else t.grad.reshape(x.shape)

    numeric = np.empty_like(x)
    flat = x.copy().reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))
