"""Small define-by-run reverse-mode differentiation engine on float64 numpy arrays.

Every op returns a :class:`Var`; calling ``backward()`` on a scalar result
walks the recorded graph once in reverse topological order.  Arrays may carry
an optional leading batch axis wherever an op documents ``(N, H, W, C)``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Var:
    """A node on the tape: value, accumulated gradient, and how to push it back."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents: Sequence["Var"] = (), backward_fn: Callable | None = None,
                 requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def backward(self, seed=None):
        if seed is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order = _topological_order(self)
        self.grad = np.asarray(seed, dtype=np.float64).reshape(self.value.shape)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True).reshape(parent.value.shape)
                else:
                    parent.grad = parent.grad + g

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def param(value) -> Var:
    return Var(value, requires_grad=True)


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(value)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Var:
    a, b = const(a), const(b)
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Var:
    """2-D matrix product, or a batch of row vectors times a matrix."""
    a, b = const(a), const(b)
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    return Var(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def reshape(a, shape) -> Var:
    a = const(a)
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def total(a, axis=None, keepdims=False) -> Var:
    a = const(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a) -> Var:
    a = const(a)
    return mul(total(a), 1.0 / a.value.size)


def relu(x) -> Var:
    x = const(x)
    on = x.value > 0
    return Var(np.where(on, x.value, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x) -> Var:
    x = const(x)
    s = _sigmoid(x.value)
    return Var(s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(logits) -> Var:
    """Softmax over the last axis, max-shifted so large logits do not overflow."""
    x = const(logits)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Var(p, (x,), back)


def bce_loss(logits, target) -> Var:
    """Mean binary cross-entropy on logits, in the stable form max(z,0) - z*t + log1p(exp(-|z|))."""
    z = const(logits)
    t = np.asarray(target.value if isinstance(target, Var) else target, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"bce_loss shape mismatch: logits {z.shape} vs target {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss target must be binary (0 or 1)")
    v = z.value
    loss = np.maximum(v, 0) - v * t + np.log1p(np.exp(-np.abs(v)))
    n = v.size
    return Var(loss.mean(), (z,), lambda g: (g * (_sigmoid(v) - t) / n,))


def mse_loss(pred, target) -> Var:
    p = const(pred)
    t = np.asarray(target.value if isinstance(target, Var) else target, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"mse_loss shape mismatch: pred {p.shape} vs target {t.shape}")
    d = p.value - t
    n = d.size
    return Var(np.mean(d * d), (p,), lambda g: (g * 2.0 * d / n,))


def conv2d(x, kernel, bias, same_padding: bool = True) -> Var:
    """Cross-correlation of an (H, W, Cin) or (N, H, W, Cin) input with a (k, k, Cin, Cout) kernel.

    Zero padding keeps the spatial size when ``same_padding`` is set.
    """
    x, kernel, bias = const(x), const(kernel), const(bias)
    squeeze = x.value.ndim == 3
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 4:
        raise ShapeError(f"conv2d input must be HxWxC or NxHxWxC, got shape {x.shape}")
    if kernel.value.ndim != 4:
        raise ShapeError(f"conv2d kernel must be k x k x Cin x Cout, got shape {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {kh}x{kw}")
    if xv.shape[-1] != cin:
        raise ShapeError(f"conv2d channel dimension mismatch: input Cin={xv.shape[-1]}, kernel Cin={cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias dimension mismatch: expected ({cout},), got {bias.shape}")
    k = kh
    n, h, w, _ = xv.shape
    pad = k // 2 if same_padding else 0
    if k == 1:
        cols = xv.reshape(-1, cin)
        ho, wo = h, w
    else:
        xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xv
        win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, ho, wo, c, k, k
        ho, wo = win.shape[1], win.shape[2]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * cin)
    w2 = kernel.value.reshape(k * k * cin, cout)
    out = (cols @ w2 + bias.value).reshape(n, ho, wo, cout)

    def back(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(-1, cout)
        dk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = g2 @ w2.T
            if k == 1:
                dx = dcols.reshape(xv.shape)
            else:
                dcols = dcols.reshape(n, ho, wo, k, k, cin)
                dxp = np.zeros((n, ho + k - 1, wo + k - 1, cin))
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
                dx = dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp
            if squeeze:
                dx = dx[0]
        return dx, dk, db

    return Var(out[0] if squeeze else out, (x, kernel, bias), back)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights, align-corners-false, edge-clamped."""
    if n_in <= 0 or n_out <= 0:
        raise ShapeError(f"bilinear resize needs positive extents, got {n_in} -> {n_out}")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(src, out_h: int, out_w: int) -> Var:
    """Bilinear resize of the two trailing axes of an (..., H, W) array."""
    s = const(src)
    if s.value.ndim < 2:
        raise ShapeError("resize_bilinear needs at least a 2-D input")
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"resize_bilinear output must be non-empty, got {out_h}x{out_w}")
    rh = bilinear_matrix(s.shape[-2], out_h)
    rw = bilinear_matrix(s.shape[-1], out_w)
    out = rh @ s.value @ rw.T
    return Var(out, (s,), lambda g: (rh.T @ g @ rw,))


def upsample_nearest_2x(x) -> Var:
    """Duplicate every pixel of an (H, W, C) or (N, H, W, C) map into a 2x2 block."""
    x = const(x)
    ax = x.value.ndim - 3
    if ax < 0:
        raise ShapeError(f"upsample_nearest_2x expects HxWxC or NxHxWxC, got {x.shape}")
    out = np.repeat(np.repeat(x.value, 2, axis=ax), 2, axis=ax + 1)

    def back(g):
        s = g.shape
        g = g.reshape(s[:ax] + (s[ax] // 2, 2, s[ax + 1] // 2, 2) + s[ax + 2:])
        return (g.sum(axis=(ax + 1, ax + 3)),)

    return Var(out, (x,), back)


def masked_mean(x, mask: np.ndarray) -> Var:
    """Mean of (..., H, W, D) features over the pixels where the (..., H, W) mask is set.

    The mask is a constant gate; gradient flows only into ``x``.
    """
    x = const(x)
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=(-2, -1))
    if np.any(counts <= 0):
        raise ValueError("masked_mean over an empty region")
    wts = m / counts[..., None, None]
    out = np.einsum("...hw,...hwd->...d", wts, x.value)
    return Var(out, (x,), lambda g: (wts[..., None] * g[..., None, None, :],))


def weighted_sum(weights, bases: np.ndarray) -> Var:
    """Sum_k weights[..., k] * bases[..., k, H, W] with constant bases."""
    w = const(weights)
    b = np.asarray(bases, dtype=np.float64)
    out = np.einsum("...k,...khw->...hw", w.value, b)
    return Var(out, (w,), lambda g: (np.einsum("...hw,...khw->...k", g, b),))


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| normalised by the larger of the two arrays' max magnitudes."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar ``fn`` w.r.t. ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad
