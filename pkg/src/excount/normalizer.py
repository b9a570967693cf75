"""De-redundancy projection of window counts back onto the token grid.

Overlapping windows count each instance several times. The normalizer spreads
every window's count uniformly over its k_p x k_p token footprint, accumulates
the spread mass per token, and divides by how many windows cover that token.
The resulting map's total matches the image count (exactly for interior mass,
within a small tolerance near borders where coverage thins out).

Two implementations are kept side by side: ``normalize`` (vectorized
scatter-add) and ``normalize_naive`` (literal triple loop). They accumulate in
the same window-major order, so their results agree bit for bit; the tests
hold them against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .counter import RedundantCountMap, WindowGeometry


@dataclass
class NormalizedCountMap:
    """Per-token count map whose total is the image count."""

    values: np.ndarray
    total: float

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise ValueError("normalized map contains non-finite values")
        if abs(self.total - float(self.values.sum())) > 1e-9 * max(1.0, abs(self.total)):
            raise ValueError("cached total is inconsistent with the map")


def coverage_frequency(geometry: WindowGeometry) -> np.ndarray:
    """Number of windows covering each token of the grid."""
    h, w = geometry.grid
    k_p, z_p = geometry.k_p, geometry.z_p
    ny, nx = geometry.grid_out

    def axis_cover(n_windows: int, extent: int) -> np.ndarray:
        f = np.zeros(extent, dtype=np.int64)
        for j in range(n_windows):
            f[j * z_p : j * z_p + k_p] += 1
        return f

    return np.outer(axis_cover(ny, h), axis_cover(nx, w))


def normalize(r: RedundantCountMap) -> NormalizedCountMap:
    """Vectorized normalizer (scatter-add over window footprints)."""
    geo = r.geometry
    h, w = geo.grid
    k_p, z_p = geo.k_p, geo.z_p
    ny, nx = geo.grid_out
    share = r.values / float(k_p * k_p)

    # flat token index of every (window, footprint-cell) pair, ordered
    # window-major then cell-major to mirror the naive loop exactly
    jy = np.arange(ny) * z_p
    jx = np.arange(nx) * z_p
    u = np.arange(k_p)
    rows = (jy[:, None, None, None] + u[None, None, :, None])  # [ny,1,k_p,1]
    cols = (jx[None, :, None, None] + u[None, None, None, :])  # [1,nx,1,k_p]
    flat_idx = (rows * w + cols).reshape(ny, nx, k_p, k_p)
    vals = np.broadcast_to(share[:, :, None, None], flat_idx.shape)

    acc = np.zeros(h * w, dtype=np.float64)
    np.add.at(acc, flat_idx.reshape(-1), vals.reshape(-1))
    acc = acc.reshape(h, w)
    freq = coverage_frequency(geo)
    out = np.zeros((h, w), dtype=np.float64)
    covered = freq > 0
    out[covered] = acc[covered] / freq[covered]
    return NormalizedCountMap(values=out, total=float(out.sum()))


def normalize_naive(r: RedundantCountMap) -> NormalizedCountMap:
    """Reference triple-loop normalizer; slow on purpose, used as an oracle."""
    geo = r.geometry
    h, w = geo.grid
    k_p, z_p = geo.k_p, geo.z_p
    ny, nx = geo.grid_out
    acc = np.zeros((h, w), dtype=np.float64)
    freq = np.zeros((h, w), dtype=np.int64)
    for jy in range(ny):
        for jx in range(nx):
            share = r.values[jy, jx] / float(k_p * k_p)
            for u in range(k_p):
                for v in range(k_p):
                    acc[jy * z_p + u, jx * z_p + v] += share
                    freq[jy * z_p + u, jx * z_p + v] += 1
    out = np.zeros((h, w), dtype=np.float64)
    for ty in range(h):
        for tx in range(w):
            if freq[ty, tx] > 0:
                out[ty, tx] = acc[ty, tx] / freq[ty, tx]
    return NormalizedCountMap(values=out, total=float(out.sum()))


def image_count(c: NormalizedCountMap) -> float:
    """Scalar image count: the map's total."""
    return c.total


def save_count_map(path, values: np.ndarray) -> None:
    """Portable text grid: header line "rows cols", then one row per line."""
    v = np.asarray(values, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{v.shape[0]} {v.shape[1]}\n")
        for row in v:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_count_map(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        head = fh.readline().split()
        rows, cols = int(head[0]), int(head[1])
        out = np.empty((rows, cols), dtype=np.float64)
        for i in range(rows):
            vals = fh.readline().split()
            if len(vals) != cols:
                raise ValueError(f"{path}: row {i} has {len(vals)} values, expected {cols}")
            out[i] = [float(v) for v in vals]
    return out
