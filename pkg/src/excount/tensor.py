"""Minimal dense tensor with reverse-mode automatic differentiation.

Every value in the counting pipeline lives on this class: weights, activations,
count maps, and losses. Data is stored as numpy float64 by default (float32 is
accepted for speed experiments but all verification runs in double precision).
Each operation records its parents and a backward closure; calling
``backward()`` on a scalar walks the graph once in reverse topological order,
so gradient accumulation does not depend on evaluation order.

A single graph is meant to be used from one thread. Tensors with frozen data
(e.g. model weights during inference) are safe for concurrent reads.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """Dense n-d array plus an optional gradient and graph bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._backward: Callable[[], None] = _noop
        self._parents: tuple[Tensor, ...] = ()

    # -- convenience -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # Gradients sum across uses; callers zero them between steps.
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autograd core -----------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor through its whole history.

        ``grad`` defaults to 1 and is only optional for scalar outputs. Each
        node's closure runs exactly once, in reverse topological order.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            node._backward()

    # -- operator sugar ------------------------------------------------------

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)


def _noop() -> None:
    return None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = _make(a.data + b.data, (a, b))

    def _bw():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = _make(a.data - b.data, (a, b))

    def _bw():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad, b.shape))

    out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = _make(a.data * b.data, (a, b))

    def _bw():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = _bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (no graph node for the scalar)."""
    s = float(s)
    out = _make(a.data * s, (a,))

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * s)

    out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0.0), (a,))

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0.0))

    out._backward = _bw
    return out


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (kept fixed so finite differences see the same f)."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out = _make(0.5 * x * (1.0 + t), (a,))

    def _bw():
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
            g = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
            a._accumulate(out.grad * g)

    out._backward = _bw
    return out


def tabs(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at zero."""
    out = _make(np.abs(a.data), (a,))

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * np.sign(a.data))

    out._backward = _bw
    return out


# -- matmul and reductions ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, 2-d or batched with identical leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims disagree, {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b))

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ out.grad)

    out._backward = _bw
    return out


def tsum(a: Tensor, axis=None) -> Tensor:
    out = _make(np.sum(a.data, axis=axis), (a,))

    def _bw():
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward = _bw
    return out


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out = _make(np.mean(a.data, axis=axis), (a,))

    def _bw():
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / n)

    out._backward = _bw
    return out


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape), (a,))

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    out._backward = _bw
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = _make(np.transpose(a.data, axes), (a,))

    def _bw():
        if a.requires_grad:
            inv = None if axes is None else np.argsort(axes)
            a._accumulate(np.transpose(out.grad, inv))

    out._backward = _bw
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow: [{start},{start + length}) outside axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _make(a.data[idx].copy(), (a,))

    def _bw():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[idx] = out.grad
            a._accumulate(g)

    out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]

    def _bw():
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * out.data.ndim
                idx[axis] = slice(offset, offset + n)
                t._accumulate(out.grad[tuple(idx)])
            offset += n

    out._backward = _bw
    return out


# -- normalization and attention helpers ---------------------------------------


def softmax_rows(a: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``a / temperature`` along the last axis.

    Stabilized by per-row max subtraction, so rows like [1000, 0] do not
    overflow. Every output row sums to 1.
    """
    if temperature <= 0:
        raise ValueError(f"softmax_rows: temperature must be > 0, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (a,))

    def _bw():
        if a.requires_grad:
            g = out.grad
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._accumulate(y * (g - dot) / temperature)

    out._backward = _bw
    return out


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply the affine pair."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = _make(xhat * gamma.data + beta.data, (a, gamma, beta))

    def _bw():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - m1 - xhat * m2))

    out._backward = _bw
    return out


# -- structured spatial ops -----------------------------------------------------


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, pad 1, stride 1, over an [H, W, Cin] grid.

    ``w`` is [3, 3, Cin, Cout]; output is [H, W, Cout].
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv2d_3x3: input must be [H,W,C], got {x.shape}")
    if w.shape[:2] != (3, 3) or w.shape[2] != x.shape[2]:
        raise ValueError(f"conv2d_3x3: weight {w.shape} incompatible with input {x.shape}")
    h, wid, cin = x.shape
    cout = w.shape[3]
    xp = np.zeros((h + 2, wid + 2, cin), dtype=x.data.dtype)
    xp[1:-1, 1:-1] = x.data
    # im2col: 9 shifted views stacked on the channel axis
    cols = np.empty((h, wid, 9 * cin), dtype=x.data.dtype)
    for i, (dy, dx) in enumerate(_OFFSETS_3X3):
        cols[:, :, i * cin : (i + 1) * cin] = xp[dy : dy + h, dx : dx + wid]
    wm = w.data.reshape(9 * cin, cout)
    out = _make(cols.reshape(-1, 9 * cin) @ wm + b.data, (x, w, b))
    out.data = out.data.reshape(h, wid, cout)

    def _bw():
        g = out.grad.reshape(-1, cout)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))
        if w.requires_grad:
            w._accumulate((cols.reshape(-1, 9 * cin).T @ g).reshape(3, 3, cin, cout))
        if x.requires_grad:
            dcols = (g @ wm.T).reshape(h, wid, 9, cin)
            gxp = np.zeros_like(xp)
            for i, (dy, dx) in enumerate(_OFFSETS_3X3):
                gxp[dy : dy + h, dx : dx + wid] += dcols[:, :, i]
            x._accumulate(gxp[1:-1, 1:-1])

    out._backward = _bw
    return out


_OFFSETS_3X3 = [(dy, dx) for dy in range(3) for dx in range(3)]


def avg_pool2d(x: Tensor, size: int, stride: int) -> Tensor:
    """Average pooling with a square window over an [H, W, C] grid (valid mode)."""
    if x.data.ndim != 3:
        raise ValueError(f"avg_pool2d: input must be [H,W,C], got {x.shape}")
    h, w, c = x.shape
    if size > h or size > w:
        raise ValueError(f"avg_pool2d: window {size} larger than input {h}x{w}")
    if size < 1 or stride < 1:
        raise ValueError(f"avg_pool2d: size/stride must be >= 1, got {size}/{stride}")
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    acc = np.zeros((ho, wo, c), dtype=x.data.dtype)
    for u in range(size):
        for v in range(size):
            acc += x.data[u : u + ho * stride : stride, v : v + wo * stride : stride]
    out = _make(acc / (size * size), (x,))

    def _bw():
        if x.requires_grad:
            g = out.grad / (size * size)
            gx = np.zeros_like(x.data)
            for u in range(size):
                for v in range(size):
                    gx[u : u + ho * stride : stride, v : v + wo * stride : stride] += g
            x._accumulate(gx)

    out._backward = _bw
    return out


def interpolate_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an [H, W] or [H, W, C] grid. Forward only (no gradient)."""
    from .imageops import bilinear_resize

    return Tensor(bilinear_resize(x.data, out_h, out_w))
