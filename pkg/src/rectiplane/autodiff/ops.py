"""Differentiable operations over NHWC tensors.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients.  Convolutions are stride 1 with
"same" zero padding; max operations break ties on the first element in
row-major order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateBatch, InvalidRate, ShapeMismatch
from .tensor import Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise / structural


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a: Tensor) -> Tensor:
    return record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return record(np.sum(a.data, keepdims=False).reshape(()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return record(np.mean(a.data).reshape(()), (a,), lambda g: (np.broadcast_to(g / n, a.shape),))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return record(np.abs(a.data), (a,), lambda g: (g * sign,))


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record(s, (a,), back)


# layers


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"fully_connected input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"bias {b.shape} vs weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def back(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, back)


def _im2col(a: np.ndarray, k: int) -> np.ndarray:
    """[N,H,W,C] -> [N*H*W, k*k*C] patches with zero "same" padding."""
    n, h, w, c = a.shape
    p = k // 2
    ap = np.pad(a, ((0, 0), (p, p), (p, p), (0, 0))) if p else a
    win = sliding_window_view(ap, (k, k), axis=(1, 2))  # n, h, w, c, k, k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Cross-correlation of x[N,H,W,Cin] with w[k,k,Cin,Cout], same padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeMismatch(f"kernel must be square with odd size, got {w.shape[:2]}")
    n, h, wd, c = x.shape
    if c != cin:
        raise ShapeMismatch(f"input channels {c} != kernel in-channels {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"bias {b.shape} vs {cout} output channels")
    cols = _im2col(x.data, k)
    wmat = w.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(n, h, wd, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            # correlate with the spatially flipped, channel-transposed kernel
            wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            gx = (_im2col(g.astype(x.dtype, copy=False), k) @ wflip).reshape(x.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, back)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd extents are padded with -inf."""
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2 expects NHWC, got {x.shape}")
    n, h, w, c = x.shape
    ph, pw = h % 2, w % 2
    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, ph), (0, pw), (0, 0)), constant_values=-np.inf)
    h2, w2 = xd.shape[1] // 2, xd.shape[2] // 2
    win = xd.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((n, h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        return (gx[:, :h, :w, :],)

    return record(out, (x,), back)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel (last axis) normalisation.

    In training mode the batch statistics are used and the running buffers are
    updated in place: ``r = momentum * r + (1 - momentum) * batch``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"gamma/beta must have shape ({c},)")
    axes = tuple(range(x.ndim - 1))
    xd = x.data.astype(np.float64)
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatch("batch norm in training mode needs batch >= 2")
        m = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (m / (m - 1))
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = (xhat * gamma.data + beta.data).astype(x.dtype)

    def back(g):
        gd = g.astype(np.float64)
        gbeta = gd.sum(axis=axes)
        ggamma = (gd * xhat).sum(axis=axes)
        dxhat = gd * gamma.data
        if training:
            m = xd.size // c
            gx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            gx = dxhat * inv_std
        return gx.astype(x.dtype), ggamma.astype(gamma.dtype), gbeta.astype(beta.dtype)

    return record(out, (x, gamma, beta), back)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def global_reduce(x: Tensor, kind: str = "max") -> Tensor:
    """Collapse H and W of an NHWC tensor per channel."""
    if x.ndim != 4:
        raise ShapeMismatch(f"global_reduce expects NHWC, got {x.shape}")
    n, h, w, c = x.shape
    if kind == "avg":
        out = x.data.mean(axis=(1, 2))
        return record(out, (x,), lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape),))
    if kind == "max":
        flat = x.data.reshape(n, h * w, c)
        idx = flat.argmax(axis=1)
        out = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]

        def back(g):
            gf = np.zeros((n, h * w, c), dtype=g.dtype)
            np.put_along_axis(gf, idx[:, None, :], g[:, None, :], axis=1)
            return (gf.reshape(x.shape),)

        return record(out, (x,), back)
    raise ValueError(f"unknown global reduction {kind!r}")


# losses


def _targets_as_probs(targets, n: int, c: int) -> np.ndarray:
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise ShapeMismatch(f"{t.shape[0]} targets for {n} samples")
        probs = np.zeros((n, c))
        probs[np.arange(n), t.astype(np.int64)] = 1.0
        return probs
    if t.shape != (n, c):
        raise ShapeMismatch(f"target shape {t.shape} vs logits ({n}, {c})")
    return t.astype(np.float64)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -sum_j t_j log softmax(z)_j.

    ``targets`` are integer class indices or one-hot / probability rows.
    """
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be [N, C], got {logits.shape}")
    n, c = logits.shape
    t = _targets_as_probs(targets, n, c)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -(t * logp).sum() / n
    p = np.exp(logp)

    def back(g):
        return ((g * (p * t.sum(axis=1, keepdims=True) - t) / n).astype(logits.dtype),)

    return record(np.array(loss), (logits,), back)


def l2_loss(pred: Tensor, target) -> Tensor:
    """Mean over the batch of the squared Euclidean distance per sample."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    diff = pred.data.astype(np.float64) - target.data
    loss = (diff * diff).sum() / n

    def back(g):
        gp = 2.0 * g * diff / n
        return gp.astype(pred.dtype), (-gp).astype(target.dtype)

    return record(np.array(loss), (pred, target), back)
