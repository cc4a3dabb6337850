"""Tape-free reverse-mode differentiation over numpy arrays.

Every primitive records its parents and a backward rule that is itself written
in terms of differentiable primitives. Running :func:`grad` with
``create_graph=True`` therefore yields tensors that can be differentiated
again, which is what score-matching training needs (the loss depends on the
input-gradient of the network output).

The primitive set is deliberately small: elementwise arithmetic with
broadcasting, reductions, ReLU, and three mutually-adjoint convolution kernels
(``conv2d``, ``conv_transpose2d``, ``conv2d_weight``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus the information needed to backpropagate through it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise / shape primitives


def _sum_to_shape(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    return a.sum(axis=axes, keepdims=True).reshape(shape)


def sum_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast tensor back down to ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _make(_sum_to_shape(a.data, shape), (a,), lambda g: (broadcast_to(g, src),))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(data, (a,), lambda g: (sum_to(g, src),))


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return sum_to(g, sa), sum_to(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    """Elementwise product. Plain arrays are treated as constants."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = sum_to(mul(g, b), sa) if a.requires_grad else None
        gb = sum_to(mul(g, a), sb) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(dtype=a.dtype), dtype=a.dtype)
    return _make(out, (a,), lambda g: (broadcast_to(g, src),))


def relu(a: Tensor) -> Tensor:
    # The mask is a constant: its derivative vanishes almost everywhere.
    mask = (a.data > 0).astype(a.dtype)
    return _make(a.data * mask, (a,), lambda g: (mul(g, mask),))


# ---------------------------------------------------------------------------
# convolution kernels (numpy level)


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(cols, shape, k, stride, pad, ho, wo):
    n, c, h, w = shape
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def _conv2d_np(x, w, stride, pad):
    o, _, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(x.shape[0], o, ho, wo)


def _conv2d_weight_np(x, g, k, stride, pad):
    cols, ho, wo = _im2col(x, k, stride, pad)
    n, o = g.shape[:2]
    gm = g.reshape(n, o, ho * wo)
    out = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
    return out.reshape(o, x.shape[1], k, k)


def _conv_transpose2d_np(y, w, stride, pad, out_hw):
    n, o, ho, wo = y.shape
    c, k = w.shape[1], w.shape[2]
    h, wd = out_hw
    if _out_size(h, k, stride, pad) != ho or _out_size(wd, k, stride, pad) != wo:
        raise ValueError(f"output size {out_hw} inconsistent with input {y.shape[2:]}")
    cols = np.matmul(w.reshape(o, -1).T, y.reshape(n, o, ho * wo))
    return _col2im(cols, (n, c, h, wd), k, stride, pad, ho, wo)


# ---------------------------------------------------------------------------
# convolution primitives


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. ``x``: (N, C, H, W), ``w``: (O, C, k, k)."""
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    hw = x.shape[2:]
    k = w.shape[2]

    def backward(g):
        gx = conv_transpose2d(g, w, stride, padding, hw) if x.requires_grad else None
        gw = conv2d_weight(x, g, k, stride, padding) if w.requires_grad else None
        return gx, gw

    return _make(_conv2d_np(x.data, w.data, stride, padding), (x, w), backward)


def conv_transpose2d(
    y: Tensor, w: Tensor, stride: int = 1, padding: int = 0, out_hw: tuple[int, int] | None = None
) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``y``: (N, O, Ho, Wo), ``w``: (O, C, k, k); the result has C channels.
    """
    y = as_tensor(y)
    w = as_tensor(w)
    if y.ndim != 4 or w.ndim != 4 or y.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d shape mismatch: input {y.shape}, weight {w.shape}")
    k = w.shape[2]
    if out_hw is None:
        out_hw = tuple((n - 1) * stride - 2 * padding + k for n in y.shape[2:])
    out_hw = tuple(out_hw)

    def backward(g):
        gy = conv2d(g, w, stride, padding) if y.requires_grad else None
        gw = conv2d_weight(g, y, k, stride, padding) if w.requires_grad else None
        return gy, gw

    return _make(_conv_transpose2d_np(y.data, w.data, stride, padding, out_hw), (y, w), backward)


def conv2d_weight(x: Tensor, g: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Weight-gradient kernel: ``<conv2d(x, h), g> == <h, conv2d_weight(x, g)>``."""
    x = as_tensor(x)
    g = as_tensor(g)
    hw = x.shape[2:]

    def backward(h):
        gx = conv_transpose2d(g, h, stride, padding, hw) if x.requires_grad else None
        gg = conv2d(x, h, stride, padding) if g.requires_grad else None
        return gx, gg

    return _make(_conv2d_weight_np(x.data, g.data, k, stride, padding), (x, g), backward)


# ---------------------------------------------------------------------------
# reverse sweep


def _toposort(outputs: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(t, False) for t in outputs]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    outputs: Tensor | Sequence[Tensor],
    inputs: Sequence[Tensor],
    grad_outputs: Tensor | Sequence[Tensor] | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Vector-Jacobian products of ``outputs`` with respect to ``inputs``.

    Inputs the outputs do not depend on receive zero gradients. With
    ``create_graph`` the returned tensors carry their own graph.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    if grad_outputs is None:
        grad_outputs = [Tensor(np.ones_like(o.data)) for o in outputs]
    elif isinstance(grad_outputs, Tensor) or isinstance(grad_outputs, np.ndarray):
        grad_outputs = [grad_outputs]
    grad_outputs = [as_tensor(g, o.dtype) for g, o in zip(grad_outputs, outputs)]
    for g, o in zip(grad_outputs, outputs):
        if g.shape != o.shape:
            raise ValueError(f"cotangent shape {g.shape} does not match output shape {o.shape}")

    grads: dict[int, Tensor] = {}
    for o, g in zip(outputs, grad_outputs):
        grads[id(o)] = grads[id(o)] + g if id(o) in grads else g

    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(_toposort(outputs)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)

    result = []
    for t in inputs:
        g = grads.get(id(t))
        result.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return result
