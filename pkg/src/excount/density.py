"""Ground-truth construction: dot annotations -> density map -> window counts.

Each annotated dot becomes an isotropic Gaussian whose width follows the
exemplar scale prior (sigma = max(1, s / 4), truncated at 4 sigma). The kernel
is renormalized to unit mass after truncation and border clipping, so the
density map always sums to exactly the dot count. Window sums of the density
then give the per-window local-count targets for each branch geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .counter import RedundantCountMap, WindowGeometry
from .imageops import window_sums


@dataclass
class DensityMap:
    """Pixel-resolution density whose integral equals the dot count."""

    values: np.ndarray
    dot_count: int

    def __post_init__(self):
        if abs(float(self.values.sum()) - self.dot_count) > 1e-6:
            raise ValueError(
                f"density mass {self.values.sum():.8f} != dot count {self.dot_count}"
            )


def density_from_dots(
    dots: np.ndarray, dims: tuple[int, int], s: float, sigma_divisor: float = 4.0
) -> DensityMap:
    """Render dot annotations into a unit-mass-per-dot density map.

    ``dots`` is [n, 2] of (x, y) pixel coordinates; ``dims`` is (height,
    width). ``s`` is the exemplar scale prior driving the kernel width.
    """
    h, w = dims
    out = np.zeros((h, w), dtype=np.float64)
    dots = np.asarray(dots, dtype=np.float64).reshape(-1, 2)
    sigma = max(1.0, float(s) / sigma_divisor)
    radius = int(np.ceil(4.0 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    for i, (x, y) in enumerate(dots):
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"dot {i} at ({x}, {y}) outside image {w}x{h}")
        cx, cy = int(round(x)), int(round(y))
        y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
        x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
        ky0, kx0 = y0 - (cy - radius), x0 - (cx - radius)
        patch = kernel[ky0 : ky0 + (y1 - y0), kx0 : kx0 + (x1 - x0)]
        out[y0:y1, x0:x1] += patch / patch.sum()
    return DensityMap(values=out, dot_count=len(dots))


def redundant_gt(density: DensityMap, geometry: WindowGeometry) -> RedundantCountMap:
    """Per-window ground-truth counts: density summed over each k x k window."""
    h, w = density.values.shape
    if (h, w) != (geometry.grid[0] * geometry.patch, geometry.grid[1] * geometry.patch):
        raise ValueError(
            f"density {h}x{w} does not match geometry grid "
            f"{geometry.grid} x patch {geometry.patch}"
        )
    if geometry.k > min(h, w):
        raise ValueError(f"window {geometry.k} px exceeds image {h}x{w}")
    sums = window_sums(density.values, geometry.k, geometry.z)
    return RedundantCountMap(values=sums, geometry=geometry, branch=-1)
