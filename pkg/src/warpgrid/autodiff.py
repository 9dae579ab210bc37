"""A small reverse-mode autodiff tape over numpy arrays.

Only the operators the tiny predictor needs are provided: 2-D convolution,
pointwise nonlinearities, nearest upsampling, bilinear sampling and
elementwise arithmetic. Tensors carry a leading batch axis, ``(N, C, H, W)``.

    tape = Tape()
    x = tape.variable(np.random.rand(1, 3, 8, 8))
    w = tape.variable(np.random.rand(4, 3, 3, 3))
    y = tape.tanh(tape.conv2d(x, w, None))
    tape.backward(tape.sum(y))
    x.grad, w.grad
"""
from __future__ import annotations

import numpy as np

from . import warp

__all__ = ["Tensor", "Tape", "conv2d_forward", "conv2d_backward", "upsample_nearest"]


# ---------------------------------------------------------------------------
# convolution primitives (also used by the feature extractors)


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = x[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, shape, k: int, stride: int, padding: int, ho: int, wo: int):
    n, c, h, w = shape
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    d = dcols.reshape(n, c, k, k, ho, wo)
    for dy in range(k):
        for dxx in range(k):
            dx[:, :, dy:dy + stride * ho:stride, dxx:dxx + stride * wo:stride] += d[:, :, dy, dxx]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d_forward(x, weight, bias=None, stride: int = 1, padding: int | None = None):
    """Cross-correlate ``x`` (N, C, H, W) with ``weight`` (O, C, k, k).

    Returns ``(out, cache)``; padding defaults to ``k // 2`` (zero padding).
    """
    o, c, k, _ = weight.shape
    if x.shape[1] != c:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {c}")
    if padding is None:
        padding = k // 2
    cols, ho, wo = _im2col(x, k, stride, padding)
    out = np.matmul(weight.reshape(o, -1), cols).reshape(x.shape[0], o, ho, wo)
    if bias is not None:
        out += bias.reshape(1, o, 1, 1)
    return out, (cols, x.shape, k, stride, padding, ho, wo)


def conv2d_backward(dout, weight, cache, need_input_grad: bool = True):
    cols, xshape, k, stride, padding, ho, wo = cache
    o = weight.shape[0]
    d2 = dout.reshape(dout.shape[0], o, ho * wo)
    dw = np.einsum("nol,nkl->ok", d2, cols).reshape(weight.shape)
    db = d2.sum(axis=(0, 2))
    dx = None
    if need_input_grad:
        dcols = np.matmul(weight.reshape(o, -1).T, d2)
        dx = _col2im(dcols, xshape, k, stride, padding, ho, wo)
    return dx, dw, db


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    return x.repeat(factor, axis=-2).repeat(factor, axis=-1)


# ---------------------------------------------------------------------------
# tape


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records operations in execution order; ``backward`` replays them in reverse."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def variable(self, value) -> Tensor:
        return Tensor(np.asarray(value), requires_grad=True)

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value), requires_grad=False)

    def _record(self, value, parents, backward) -> Tensor:
        out = Tensor(value, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._backward = backward
            self.nodes.append(out)
        return out

    def backward(self, out: Tensor, grad=None) -> None:
        if grad is None:
            grad = np.ones_like(out.value)
        out.grad = np.asarray(grad, dtype=out.value.dtype)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        def back(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))
        return self._record(a.value + b.value, (a, b), back)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        def back(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(-_unbroadcast(g, b.shape))
        return self._record(a.value - b.value, (a, b), back)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        def back(g):
            a._accumulate(_unbroadcast(g * b.value, a.shape))
            b._accumulate(_unbroadcast(g * a.value, b.shape))
        return self._record(a.value * b.value, (a, b), back)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self._record(a.value * factor, (a,), lambda g: a._accumulate(g * factor))

    def sum(self, a: Tensor) -> Tensor:
        return self._record(
            np.asarray(a.value.sum()), (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape).copy())
        )

    def concat(self, xs: list[Tensor], axis: int = 1) -> Tensor:
        sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

        def back(g):
            for x, part in zip(xs, np.split(g, sizes, axis=axis)):
                x._accumulate(part)
        return self._record(np.concatenate([x.value for x in xs], axis=axis), xs, back)

    def slice_channels(self, a: Tensor, start: int, stop: int) -> Tensor:
        def back(g):
            full = np.zeros_like(a.value)
            full[:, start:stop] = g
            a._accumulate(full)
        return self._record(a.value[:, start:stop], (a,), back)

    # -- nonlinearities -----------------------------------------------------

    def leaky_relu(self, a: Tensor, slope: float = 0.1) -> Tensor:
        pos = a.value > 0
        return self._record(
            np.where(pos, a.value, slope * a.value), (a,), lambda g: a._accumulate(np.where(pos, g, slope * g))
        )

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.value)
        return self._record(y, (a,), lambda g: a._accumulate(g * (1 - y * y)))

    def sigmoid(self, a: Tensor) -> Tensor:
        y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
        return self._record(y, (a,), lambda g: a._accumulate(g * y * (1 - y)))

    # -- spatial ------------------------------------------------------------

    def conv2d(self, x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
               padding: int | None = None) -> Tensor:
        out, cache = conv2d_forward(x.value, weight.value, None if bias is None else bias.value, stride, padding)
        parents = (x, weight) if bias is None else (x, weight, bias)

        def back(g):
            dx, dw, db = conv2d_backward(g, weight.value, cache, need_input_grad=x.requires_grad)
            if dx is not None:
                x._accumulate(dx)
            weight._accumulate(dw)
            if bias is not None:
                bias._accumulate(db)
        return self._record(out, parents, back)

    def upsample(self, a: Tensor, factor: int = 2) -> Tensor:
        def back(g):
            n, c, h, w = a.shape
            a._accumulate(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))
        return self._record(upsample_nearest(a.value, factor), (a,), back)

    def bilinear_sample(self, image: Tensor, grid: Tensor) -> Tensor:
        """Batched warp: image (N, C, Hs, Ws), grid (N, 2, H, W)."""
        out = np.stack([warp.bilinear_sample(im, g) for im, g in zip(image.value, grid.value)])
        out = out.astype(image.value.dtype, copy=False)

        def back(g):
            grads = [warp.bilinear_sample_backward(im, gr, up)
                     for im, gr, up in zip(image.value, grid.value, g)]
            image._accumulate(np.stack([w.d_image for w in grads]).astype(image.value.dtype, copy=False))
            grid._accumulate(np.stack([w.d_grid for w in grads]).astype(grid.value.dtype, copy=False))
        return self._record(out, (image, grid), back)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g
