"""Differentiable primitives.

Elementwise ops follow numpy broadcasting; gradients are summed back to the
operand shapes. Images are laid out ``(batch, channels, height, width)``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, as_tensor, record

LOG_FLOOR = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return record(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise ValueError("div: division by zero")
    out = a.data / b.data
    return record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return record(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record("softmax", out, (x,), vjp)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise ValueError(f"log: non-positive input (min {x.data.min()!r})")
    return record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data > lo
    return record("clamp_min", np.where(mask, x.data, lo), (x,), lambda g: (g * mask,))


def safe_log(x) -> Tensor:
    """log after clamping at ``LOG_FLOOR`` so losses stay finite."""
    return log(clamp_min(x, LOG_FLOOR))


def sum(x, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    if axis is None:
        return record("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    ax = axis % x.data.ndim
    out = x.data.sum(axis=ax)
    return record(
        "sum", out, (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),),
    )


def mean(x) -> Tensor:
    x = as_tensor(x)
    return scale(sum(x), 1.0 / x.data.size)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat: no inputs")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: {exc}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return record("concat", out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x, indices: Sequence[int], axis: int = -1) -> Tensor:
    """Select entries along ``axis`` (columns by default)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return record("take", out, (x,), vjp)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x) -> Tensor:
    """Collapse every axis after the batch axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def conv2d(x, w, b=None) -> Tensor:
    """Valid cross-correlation, stride 1: ``(B,C,H,W) * (O,C,k,k) -> (B,O,H-k+1,W-k+1)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if Cw != C or k != k2:
        raise ValueError(f"conv2d: kernel {w.shape} does not fit input {x.shape}")
    if H < k or W < k:
        raise ValueError(f"conv2d: input {H}x{W} smaller than kernel {k}x{k}")
    Ho, Wo = H - k + 1, W - k + 1
    cols = sliding_window_view(x.data, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wm = w.data.reshape(O, C * k * k)
    out = cols @ wm.T
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ValueError(f"conv2d: bias shape {b.shape}, expected {(O,)}")
        out = out + b.data
        inputs = (x, w, b)
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = (gm @ wm).reshape(B, Ho, Wo, C, k, k)
            gx = np.zeros_like(x.data)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + Ho, j:j + Wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return record("conv2d", out, inputs, vjp)


def maxpool2x2(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2x2: expected 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2x2: spatial size {H}x{W} is not even")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return record("maxpool2x2", out, (x,), vjp)
