"""Dense float64 tensors with reverse-mode differentiation.

Each op returns a new :class:`Tensor` holding its parents and a closure that
maps the output gradient to one gradient per parent. ``Tensor.backward``
walks the recorded graph in reverse topological order, then releases the
closures; a graph can be differentiated once.

Set ``ASCNET_CHECK_FINITE=1`` to assert every op output is finite.
"""
from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatch, NonFiniteValue, NonScalarLoss, ShapeMismatch, TapeConsumed

CHECK_FINITE = os.environ.get("ASCNET_CHECK_FINITE", "") == "1"


class Tensor:
    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable | None = None
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise NonScalarLoss(f"backward needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed:
            raise TapeConsumed("graph was already differentiated; rebuild it with a new forward pass")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"non-finite output from {op}")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents), _op=op)
    if needs:
        out._backward = backward
    return out


def _check_broadcast(a: tuple, b: tuple) -> tuple:
    """Equal rank; each axis equal or singleton on one side."""
    if len(a) != len(b):
        raise ShapeMismatch(f"rank mismatch {a} vs {b}")
    out = []
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ShapeMismatch(f"cannot combine shapes {a} and {b}")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; singleton axes broadcast (gating by attention maps)."""
    _check_broadcast(a.shape, b.shape)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "multiply")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data >= 0  # subgradient 1 at zero
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def split_posneg(a: Tensor) -> tuple[Tensor, Tensor]:
    """(max(x, 0), min(x, 0)); the zero subgradient goes to the positive part."""
    mask = a.data >= 0
    pos = _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "split_pos")
    negp = _make(np.where(mask, 0.0, a.data), (a,), lambda g: (g * ~mask,), "split_neg")
    return pos, negp


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeMismatch(f"cannot concatenate {ref} with {t.shape} on axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def sum_all(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, float(g) / n),), "mean")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _make(np.array(np.mean(diff * diff)), (pred,),
                 lambda g: (float(g) * 2.0 * diff / n,), "mse")


# ---------------------------------------------------------------- pooling

def pool_spatial(x: Tensor, kind: str = "avg") -> Tensor:
    """Reduce over the length axis: (B, C, N) -> (B, C, 1)."""
    return _pool(x, kind, axis=2)


def pool_channel(x: Tensor, kind: str = "avg") -> Tensor:
    """Reduce over the channel axis: (B, C, N) -> (B, 1, N)."""
    return _pool(x, kind, axis=1)


def _pool(x: Tensor, kind: str, axis: int) -> Tensor:
    if x.ndim != 3:
        raise ShapeMismatch(f"pooling expects (B, C, N), got {x.shape}")
    if kind == "avg":
        n = x.shape[axis]
        return _make(x.data.mean(axis=axis, keepdims=True), (x,),
                     lambda g: (np.broadcast_to(g / n, x.shape).copy(),), f"avgpool{axis}")
    if kind == "max":
        idx = np.argmax(x.data, axis=axis)  # first maximum wins ties
        out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)

        def backward(g):
            gx = np.zeros(x.shape)
            np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis=axis)
            return (gx,)

        return _make(out, (x,), backward, f"maxpool{axis}")
    raise ValueError(f"unknown pooling kind {kind!r}")


# ---------------------------------------------------------------- dense

def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(B, F_in) @ W.T + b with W of shape (F_out, F_in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"fully_connected: x {x.shape}, w {w.shape}, b {b.shape}")
    return _make(x.data @ w.data.T + b.data, (x, w, b),
                 lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)), "fc")


# ---------------------------------------------------------------- convolution

def same_padding(n: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output length ceil(n/stride) and (left, right) zero padding.

    Padding is split evenly; an odd total puts the extra zero on the right.
    """
    out = -(-n // stride)
    total = max((out - 1) * stride + kernel - n, 0)
    return out, total // 2, total - total // 2


def _im2col(xp: np.ndarray, kernel: int, stride: int, out: int) -> np.ndarray:
    """(B, C, Np) -> (B, out, C, K) windows."""
    win = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride][:, :, :out]
    return win.transpose(0, 2, 1, 3)


def _col2im(cols: np.ndarray, length: int, stride: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add (B, out, C, K) windows into (B, C, length)."""
    b, out, c, k = cols.shape
    xp = np.zeros((b, length, c))
    span = stride * (out - 1) + 1
    for j in range(k):
        xp[:, j:j + span:stride, :] += cols[:, :, :, j]
    return xp.transpose(0, 2, 1)


def _correlate(xp: np.ndarray, wm: np.ndarray, kernel: int, stride: int, out: int) -> tuple:
    """Valid cross-correlation of padded input with a (C_out, C_in*K) weight matrix.

    Returns the (B, C_out, out) result and the im2col matrix used.
    """
    bsz, c_in, _ = xp.shape
    cols = _im2col(xp, kernel, stride, out).reshape(bsz * out, c_in * kernel)
    y = (cols @ wm.T).reshape(bsz, out, -1).transpose(0, 2, 1)
    return y, cols


def _flipped(w: np.ndarray) -> np.ndarray:
    """(C_out, C_in, K) -> (C_in, C_out*K) with taps reversed: the stride-1 adjoint kernel."""
    return np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2)).reshape(w.shape[1], -1)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with "same" zero padding: (B, C_in, N) -> (B, C_out, ceil(N/stride))."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv1d: x {x.shape}, w {w.shape}, b {b.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    bsz, c_in, n = x.shape
    c_out, _, k = w.shape
    out, left, right = same_padding(n, k, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    wm = w.data.reshape(c_out, c_in * k)
    y, cols = _correlate(xp, wm, k, stride, out)
    y = y + b.data[None, :, None]

    def backward(g):
        gm = g.transpose(0, 2, 1).reshape(bsz * out, c_out)
        gw = (gm.T @ cols).reshape(w.shape)
        if stride == 1:
            gp = np.pad(g, ((0, 0), (0, 0), (k - 1 - left, k - 1 - right)))
            gx, _ = _correlate(gp, _flipped(w.data), k, 1, n)
        else:
            gcols = (gm @ wm).reshape(bsz, out, c_in, k)
            gx = _col2im(gcols, n + left + right, stride)[:, :, left:left + n]
        return gx, gw, g.sum(axis=(0, 2))

    return _make(np.ascontiguousarray(y), (x, w, b), backward, "conv1d")


def transposed_conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d`: (B, C_in, N) -> (B, C_out, N*stride).

    ``w`` has shape (C_in, C_out, K); with zero bias this is exactly the
    transpose of ``conv1d`` using the same weight array on inputs of length
    N*stride.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"transposed_conv1d: x {x.shape}, w {w.shape}, b {b.shape}")
    bsz, c_in, n = x.shape
    _, c_out, k = w.shape
    m = n * stride
    _, left, right = same_padding(m, k, stride)
    xm = x.data.transpose(0, 2, 1).reshape(bsz * n, c_in)
    wm = w.data.reshape(c_in, c_out * k)
    cols = (xm @ wm).reshape(bsz, n, c_out, k)
    y = _col2im(cols, m + left + right, stride)[:, :, left:left + m] + b.data[None, :, None]

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (left, right)))
        gx, gcols = _correlate(gp, wm, k, stride, n)
        gw = (xm.T @ gcols).reshape(w.shape)
        return gx, gw, g.sum(axis=(0, 2))

    return _make(np.ascontiguousarray(y), (x, w, b), backward, "transposed_conv1d")


# ---------------------------------------------------------------- normalization

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (batch, length).

    In training mode the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch_stat`` (the
    variance update uses the unbiased estimate).
    """
    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"batch_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    g_ = gamma.data[None, :, None]
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None]) * inv[None, :, None]

        def backward_eval(g):
            return g * g_ * inv[None, :, None], (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

        return _make(xhat * g_ + beta.data[None, :, None], (x, gamma, beta), backward_eval, "bn_eval")

    m = x.shape[0] * x.shape[2]
    if m < 2:
        raise DegenerateBatch("batch norm needs at least two values per channel in training")
    mu = x.data.mean(axis=(0, 2))
    var = x.data.var(axis=(0, 2))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
    running_mean *= momentum
    running_mean += (1 - momentum) * mu
    running_var *= momentum
    running_var += (1 - momentum) * var * m / (m - 1)

    def backward(g):
        gxhat = g * g_
        gx = (inv[None, :, None] / m) * (
            m * gxhat
            - gxhat.sum(axis=(0, 2), keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
        )
        return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return _make(xhat * g_ + beta.data[None, :, None], (x, gamma, beta), backward, "bn_train")
