"""Differentiable resampling: separable bilinear/bicubic resize and affine grid sampling.

Resizes are linear maps applied along each spatial axis, ``out = Ry @ x @ Rx.T``,
so the backward pass is the transpose of the same tap weights.
All coordinate conventions use half-pixel centres (align_corners=False).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import DimensionError, Tensor, matmul, reshape, transpose


@lru_cache(maxsize=None)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``d`` holds the two tap weights for output sample ``d`` (float64)."""
    m = np.zeros((n_out, n_in))
    for d in range(n_out):
        s = (d + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        f = s - i0
        m[d, i0] += 1.0 - f
        m[d, i1] += f
    m.setflags(write=False)
    return m


def cubic_weight(x: float, a: float = -0.5) -> float:
    x = abs(x)
    if x <= 1.0:
        return (a + 2.0) * x ** 3 - (a + 3.0) * x ** 2 + 1.0
    if x < 2.0:
        return a * x ** 3 - 5.0 * a * x ** 2 + 8.0 * a * x - 4.0 * a
    return 0.0


@lru_cache(maxsize=None)
def bicubic_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """Catmull-Rom (a=-0.5) taps with edge-replicated borders (float64)."""
    m = np.zeros((n_out, n_in))
    for d in range(n_out):
        s = (d + 0.5) * n_in / n_out - 0.5
        i0 = int(np.floor(s))
        t = s - i0
        for j in range(-1, 3):
            idx = min(max(i0 + j, 0), n_in - 1)
            m[d, idx] += cubic_weight(t - j, a)
    m.setflags(write=False)
    return m


def _separable(x: Tensor, ry: np.ndarray, rx: np.ndarray) -> Tensor:
    dt = x.data.dtype
    ry = ry.astype(dt)
    rxt = np.ascontiguousarray(rx.T.astype(dt))
    out = np.matmul(np.matmul(ry, x.data), rxt)

    def bw(g):
        return (np.matmul(np.matmul(ry.T, g), rxt.T),)

    return Tensor._make(out, (x,), bw)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: target {out_h}x{out_w} must be positive")
    H, W = x.shape[-2:]
    return _separable(x, bilinear_matrix(H, out_h), bilinear_matrix(W, out_w))


def bicubic_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bicubic_resize: target {out_h}x{out_w} must be positive")
    H, W = x.shape[-2:]
    return _separable(x, bicubic_matrix(H, out_h), bicubic_matrix(W, out_w))


def resize_array(img: np.ndarray, out_h: int, out_w: int, mode: str = "bicubic") -> np.ndarray:
    """Plain-array convenience wrapper used by the data pipeline."""
    mat = bicubic_matrix if mode == "bicubic" else bilinear_matrix
    H, W = img.shape[-2:]
    ry = mat(H, out_h).astype(img.dtype)
    rx = mat(W, out_w).astype(img.dtype)
    return np.matmul(np.matmul(ry, img), rx.T)


@lru_cache(maxsize=None)
def _base_grid(H: int, W: int) -> np.ndarray:
    xs = (2.0 * np.arange(W) + 1.0) / W - 1.0
    ys = (2.0 * np.arange(H) + 1.0) / H - 1.0
    gx, gy = np.meshgrid(xs, ys)
    base = np.stack([gx.ravel(), gy.ravel(), np.ones(H * W)], axis=1)
    base.setflags(write=False)
    return base


def affine_grid(theta: Tensor, H: int, W: int) -> Tensor:
    """Map each output pixel centre through ``theta[B, 2, 3]``; returns ``[B, H, W, 2]`` (x, y)."""
    if theta.shape[1:] != (2, 3):
        raise DimensionError(f"affine_grid: theta must be [B, 2, 3], got {theta.shape}")
    base = Tensor(_base_grid(H, W).astype(theta.data.dtype))
    grid = matmul(base, transpose(theta, (0, 2, 1)))
    return reshape(grid, (theta.shape[0], H, W, 2))


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``x[B, C, H, W]`` at normalized ``grid[B, Ho, Wo, 2]``.

    Corners falling outside the source contribute zero.
    """
    B, C, H, W = x.shape
    _, Ho, Wo, _ = grid.shape
    dt = x.data.dtype
    gx = grid.data[..., 0].reshape(B, -1)
    gy = grid.data[..., 1].reshape(B, -1)
    ix = ((gx + 1.0) * W - 1.0) / 2.0
    iy = ((gy + 1.0) * H - 1.0) / 2.0
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    fx = (ix - x0).astype(dt)
    fy = (iy - y0).astype(dt)
    P = Ho * Wo
    flat = x.data.reshape(B, C, H * W)
    boff = (np.arange(B) * H * W)[:, None]

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        idx = np.where(valid, yy * W + xx, 0)
        wy = fy if dy else 1.0 - fy
        wx = fx if dx else 1.0 - fx
        vals = np.take_along_axis(flat, idx[:, None, :], axis=2) * valid[:, None, :]
        corners.append((idx + boff, valid, wy, wx, vals))

    out = np.zeros((B, C, P), dtype=dt)
    for _, _, wy, wx, vals in corners:
        out += (wy * wx)[:, None, :] * vals
    out = out.reshape(B, C, Ho, Wo)

    def bw(g):
        g = g.reshape(B, C, P)
        gx_in = None
        if x.requires_grad:
            gflat = np.zeros((C, B * H * W), dtype=dt)
            for gidx, valid, wy, wx, _ in corners:
                w = (wy * wx * valid).ravel()
                for c in range(C):
                    gflat[c] += np.bincount(gidx.ravel(), weights=(g[:, c, :].ravel() * w), minlength=B * H * W).astype(dt)
            gx_in = gflat.reshape(C, B, H, W).transpose(1, 0, 2, 3).copy()
        ggrid = None
        if grid.requires_grad:
            d_ix = np.zeros((B, P), dtype=dt)
            d_iy = np.zeros((B, P), dtype=dt)
            for (_, _, _, _, vals), (dy, dx) in zip(corners, ((0, 0), (0, 1), (1, 0), (1, 1))):
                gv = (g * vals).sum(axis=1)
                sx = 1.0 if dx else -1.0
                sy = 1.0 if dy else -1.0
                d_ix += gv * sx * (fy if dy else 1.0 - fy)
                d_iy += gv * sy * (fx if dx else 1.0 - fx)
            ggrid = np.stack([d_ix * (W / 2.0), d_iy * (H / 2.0)], axis=-1).reshape(B, Ho, Wo, 2).astype(dt)
        return gx_in, ggrid

    return Tensor._make(out, (x, grid), bw)
