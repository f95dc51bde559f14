"""Minimal reverse-mode autodiff over NHWC numpy arrays.

Only the handful of ops the predictive-coding cell needs. A node records
its parents and a closure mapping the output gradient to parent
gradients; ops whose inputs need no gradient build no graph at all, so
inference runs at plain-numpy cost.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data, parents, backward_fn):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn)
    return Tensor(data)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for p, g in zip(node.parents, node.backward_fn(node.grad)):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g
        # Interior gradients are dead once propagated.
        node.grad = None
        node.backward_fn = None


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def clamp_max(a: Tensor, hi: float) -> Tensor:
    mask = a.data < hi
    # np.minimum keeps NaN visible so diverged models fail loudly downstream.
    return _node(np.minimum(a.data, a.data.dtype.type(hi)), (a,), lambda g: (g * mask,))


def concat(ts, axis=-1) -> Tensor:
    sizes = [t.data.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), lambda g: tuple(np.split(g, cuts, axis=axis)))


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _node(a.data[..., start:stop], (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, g / n),))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def maxpool2(a: Tensor) -> Tensor:
    x = a.data
    B, H, W, C = x.shape
    blocks = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        grad = np.zeros_like(blocks)
        np.put_along_axis(grad, idx[..., None], g[..., None], axis=-1)
        grad = grad.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (grad.reshape(B, H, W, C),)

    return _node(out, (a,), bw)


def upsample2(a: Tensor) -> Tensor:
    out = a.data.repeat(2, axis=1).repeat(2, axis=2)

    def bw(g):
        B, H, W, C = g.shape
        return (g.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4)),)

    return _node(out, (a,), bw)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    B, H, W, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    s = xp.strides
    # (B, H, W, k, k, C) view: the gather copies contiguous channel runs.
    win = as_strided(xp, (B, H, W, k, k, C), (s[0], s[1], s[2], s[1], s[2], s[3]), writeable=False)
    return win.reshape(B * H * W, k * k * C)


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    B, H, W, C = shape
    p = k // 2
    cols = cols.reshape(B, H, W, k, k, C)
    out = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + H, j : j + W, :] += cols[:, :, :, i, j]
    return out[:, p : p + H, p : p + W, :]


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 'same' convolution. ``w`` is laid out ``(k, k, C_in, C_out)``."""
    k, _, C, O = w.data.shape
    B, H, W, _ = x.data.shape
    cols = _im2col(x.data, k)
    wm = w.data.reshape(k * k * C, O)
    out = (cols @ wm + b.data).reshape(B, H, W, O)
    if not (x.requires_grad or w.requires_grad or b.requires_grad):
        return Tensor(out)
    keep_cols = cols if w.requires_grad else None
    del cols

    def bw(g):
        g2 = g.reshape(-1, O)
        dx = _col2im(g2 @ wm.T, x.data.shape, k) if x.requires_grad else None
        dw = (keep_cols.T @ g2).reshape(w.data.shape) if w.requires_grad else None
        db = g2.sum(axis=0) if b.requires_grad else None
        return dx, dw, db

    return Tensor(out, True, (x, w, b), bw)
