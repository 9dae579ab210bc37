"""Differentiable bilinear warping.

``bilinear_sample(image, grid)`` reads ``image`` at the normalized coordinates in
``grid`` (align-corners, zero padding per tap), the same convention as
``grid_sample(..., align_corners=True, padding_mode="zeros")``. Arrays are
processed in float64; callers get plain ndarrays back.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagery import SamplingGrid, identity_grid

__all__ = [
    "WarpError",
    "WarpGradients",
    "bilinear_sample",
    "bilinear_sample_backward",
    "bilinear_weights",
    "compose_grids",
    "resample",
    "OUT_OF_RANGE",
]

# Sample positions this close to an integer pixel coordinate are snapped onto it,
# which makes identity grids reproduce images exactly despite f32 rounding.
_SNAP_PX = 1e-4
OUT_OF_RANGE = 2.0


class WarpError(ValueError):
    pass


@dataclass(frozen=True)
class WarpGradients:
    """Cotangents of a warp: w.r.t. grid coordinates (2, H, W) and source image (C, Hs, Ws)."""

    d_grid: np.ndarray
    d_image: np.ndarray


def _as_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.size == 0:
        raise WarpError(f"image must be nonempty (C, H, W), got {img.shape}")
    return img


def _as_grid(grid) -> np.ndarray:
    g = np.asarray(grid.coords if isinstance(grid, SamplingGrid) else grid, dtype=np.float64)
    if g.ndim != 3 or g.shape[0] != 2:
        raise WarpError(f"grid must be (2, H, W), got {g.shape}")
    return g


def _to_pixels(g: np.ndarray, hs: int, ws: int):
    px = (g[0] + 1.0) * (ws - 1) / 2.0
    py = (g[1] + 1.0) * (hs - 1) / 2.0
    for p in (px, py):
        r = np.rint(p)
        near = np.abs(p - r) < _SNAP_PX
        p[near] = r[near]
    return px, py


def _taps(g: np.ndarray, hs: int, ws: int):
    """Flat tap indices (4, N), per-tap validity (4, N) and fractional offsets (N,).

    Taps are ordered (y0, x0), (y0, x1), (y1, x0), (y1, x1). Invalid taps point at
    pixel 0 and must be masked by the caller.
    """
    px, py = _to_pixels(g, hs, ws)
    px = px.ravel()
    py = py.ravel()
    # a sample exactly on the last row/column belongs to the cell that ends there,
    # so its derivative is taken from inside the image
    x0 = np.floor(px)
    y0 = np.floor(py)
    if ws > 1:
        x0[px == ws - 1] = ws - 2
    if hs > 1:
        y0[py == hs - 1] = hs - 2
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xs = np.stack([x0, x0 + 1, x0, x0 + 1])
    ys = np.stack([y0, y0, y0 + 1, y0 + 1])
    valid = (xs >= 0) & (xs < ws) & (ys >= 0) & (ys < hs)
    flat = np.where(valid, ys * ws + xs, 0)
    return flat, valid, fx, fy


def _weights(fx, fy, valid):
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    return w * valid


def bilinear_weights(grid, height: int, width: int):
    """Return the four (row, col, weight) taps for every sample of ``grid``.

    Each entry is shaped like the grid's spatial dims. Weights of out-of-bounds
    taps are zero, so for in-range samples the four weights sum to 1.
    """
    g = _as_grid(grid)
    shape = g.shape[1:]
    flat, valid, fx, fy = _taps(g, height, width)
    w = _weights(fx, fy, valid)
    rows, cols = np.divmod(flat, width)
    return [(rows[k].reshape(shape), cols[k].reshape(shape), w[k].reshape(shape)) for k in range(4)]


def bilinear_sample(image, grid, out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Warp ``image`` (C, Hs, Ws) by ``grid`` (2, H, W) into a (C, H, W) array."""
    img = _as_image(image)
    g = _as_grid(grid)
    if out_shape is not None and tuple(out_shape) != g.shape[1:]:
        raise WarpError(f"grid is {g.shape[1:]}, requested output {tuple(out_shape)}")
    c, hs, ws = img.shape
    flat, valid, fx, fy = _taps(g, hs, ws)
    w = _weights(fx, fy, valid)
    vals = img.reshape(c, -1)[:, flat]  # (C, 4, N)
    return np.einsum("ckn,kn->cn", vals, w).reshape((c,) + g.shape[1:])


def bilinear_sample_backward(image, grid, upstream) -> WarpGradients:
    """Contract the Jacobians of ``bilinear_sample`` with ``upstream`` (C, H, W)."""
    img = _as_image(image)
    g = _as_grid(grid)
    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 2:
        up = up[None]
    if up.shape != (img.shape[0],) + g.shape[1:]:
        raise WarpError(f"upstream {up.shape} does not match output {(img.shape[0],) + g.shape[1:]}")
    c, hs, ws = img.shape
    flat, valid, fx, fy = _taps(g, hs, ws)
    v = img.reshape(c, -1)[:, flat] * valid  # (C, 4, N)
    u = up.reshape(c, -1)

    d_px = (1 - fy) * (v[:, 1] - v[:, 0]) + fy * (v[:, 3] - v[:, 2])
    d_py = (1 - fx) * (v[:, 2] - v[:, 0]) + fx * (v[:, 3] - v[:, 1])
    d_grid = np.stack([
        (u * d_px).sum(axis=0) * (ws - 1) / 2.0,
        (u * d_py).sum(axis=0) * (hs - 1) / 2.0,
    ]).reshape((2,) + g.shape[1:])

    w = _weights(fx, fy, valid).ravel()
    idx = flat.ravel()
    d_image = np.stack([
        np.bincount(idx, weights=(w * np.tile(u[k], 4)), minlength=hs * ws) for k in range(c)
    ])
    return WarpGradients(d_grid=d_grid, d_image=d_image.reshape(c, hs, ws))


def compose_grids(g_first, g_second) -> SamplingGrid:
    """Grid equivalent of warping by ``g_first`` and then by ``g_second``.

    ``W(W(I, g_first), g_second)`` is approximately ``W(I, compose_grids(g_first, g_second))``;
    the two agree exactly only where ``g_first`` is affine within each cell.
    Pixels whose ``g_second`` coordinate leaves [-1, 1] are set to ``OUT_OF_RANGE``.
    """
    a = _as_grid(g_first)
    b = _as_grid(g_second)
    if a.shape != b.shape:
        raise WarpError(f"grid shapes differ: {a.shape} vs {b.shape}")
    out = bilinear_sample(a, b)
    outside = ~np.all(np.abs(b) <= 1.0, axis=0)
    out[:, outside] = OUT_OF_RANGE
    return SamplingGrid(out)


def resample(image, height: int, width: int) -> np.ndarray:
    """Resize (C, h, w) to (C, height, width) by align-corners bilinear sampling."""
    return bilinear_sample(image, identity_grid(height, width).coords.astype(np.float64))
