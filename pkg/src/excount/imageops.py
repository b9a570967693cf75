"""Plain-array raster helpers shared by data loading, the visualizer, and tests."""

from __future__ import annotations

import numpy as np


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample to (out_h, out_w); endpoints map to endpoints.

    Accepts [H, W] or [H, W, C] float arrays and returns the same layout.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: bad output size {out_h}x{out_w}")
    a = np.asarray(arr, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    h, w, _ = a.shape
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.array([(h - 1) / 2.0])
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.array([(w - 1) / 2.0])
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out[:, :, 0] if squeeze else out


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resample; used for block-style hint upsampling."""
    a = np.asarray(arr)
    h = a.shape[0]
    w = a.shape[1]
    ys = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(int)
    xs = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(int)
    return a[ys][:, xs]


def integral_image(arr: np.ndarray) -> np.ndarray:
    """Summed-area table with a zero top/left border row, for O(1) window sums."""
    h, w = arr.shape
    out = np.zeros((h + 1, w + 1), dtype=np.float64)
    out[1:, 1:] = np.cumsum(np.cumsum(arr, axis=0), axis=1)
    return out


def window_sums(arr: np.ndarray, size: int, stride: int) -> np.ndarray:
    """Sums of ``arr`` over size x size windows stepped by ``stride`` (valid mode)."""
    h, w = arr.shape
    if size > h or size > w:
        raise ValueError(f"window_sums: window {size} larger than grid {h}x{w}")
    ii = integral_image(arr)
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    ys = np.arange(ho) * stride
    xs = np.arange(wo) * stride
    return (
        ii[np.ix_(ys + size, xs + size)]
        - ii[np.ix_(ys, xs + size)]
        - ii[np.ix_(ys + size, xs)]
        + ii[np.ix_(ys, xs)]
    )


def to_uint8(arr: np.ndarray) -> np.ndarray:
    """Clamp a float image in [0, 1] to 8-bit, rounding half up."""
    return np.clip(np.floor(np.asarray(arr) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def to_float(arr: np.ndarray) -> np.ndarray:
    """8-bit image to float64 in [0, 1]."""
    return np.asarray(arr, dtype=np.float64) / 255.0
