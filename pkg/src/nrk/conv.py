"""2-D cross-correlation via im2col."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x[B, C_in, H, W]`` with ``w[C_out, C_in, k, k]``.

    No kernel flip. Output side is ``(H + 2*padding - k) // stride + 1``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d: input has {C} channels, weight {w.shape} expects {Cw}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}"
        )
    Ho = _out_size(H, kh, stride, padding)
    Wo = _out_size(W, kw, stride, padding)
    w2 = w.data.reshape(O, C * kh * kw)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride]
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)

    out = cols @ w2.T
    if b is not None:
        out += b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(B, Ho, Wo, C, kh, kw)
            if kh == 1 and kw == 1 and padding == 0:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = dcols[..., 0, 0].transpose(0, 3, 1, 2)
            else:
                gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=x.data.dtype)
                dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
                for p in range(kh):
                    for q in range(kw):
                        gxp[:, :, p:p + stride * Ho:stride, q:q + stride * Wo:stride] += dcols[..., p, q]
                gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(np.ascontiguousarray(out), parents, bw)
