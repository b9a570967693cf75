"""Attention-informed count visualization.

The match map already says where exemplar-like content sits; the normalized
count map says how much is there. The visualizer budgets round(total * M_e)
hint points (the magnitude M_e converts instance counts back to token counts),
places them on the strongest match-map cells, and renders either the hint
itself (detection mode) or the hint gated by the count map (density mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .imageops import bilinear_resize, nearest_resize
from .normalizer import NormalizedCountMap

MODES = ("detection", "density")


@dataclass
class VisualizationMap:
    """Binary hint grid plus the mode-specific overlay built from it."""

    mode: str
    hint: np.ndarray  # [H_t, W_t] of {0, 1}
    overlay: np.ndarray  # same shape, real-valued
    n_top: int

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.hint.sum()) != self.n_top:
            raise ValueError("hint cardinality does not equal n_top")


def visualize(
    c: NormalizedCountMap,
    match_map: np.ndarray,
    magnitude: float,
    mode: str = "detection",
) -> VisualizationMap:
    """Top-N_top hint map on match_map cells, N_top = round(sum(C) * M_e).

    The count total is taken at the count map's native resolution; the map is
    bilinearly interpolated to the match grid only where cell values are
    needed (density overlay). Ties in the match map break by row-major index,
    so the output is fully deterministic.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    gh, gw = match_map.shape
    n_cells = gh * gw
    n_top = int(math.floor(c.total * magnitude + 0.5))
    n_top = min(max(n_top, 0), n_cells)

    flat = match_map.reshape(-1)
    # sort by value desc, then flat index asc
    order = np.lexsort((np.arange(n_cells), -flat))
    hint = np.zeros(n_cells, dtype=np.float64)
    hint[order[:n_top]] = 1.0
    hint = hint.reshape(gh, gw)

    if mode == "detection":
        overlay = hint.copy()
    else:
        cmap = c.values
        if cmap.shape != (gh, gw):
            cmap = bilinear_resize(cmap, gh, gw)
        overlay = hint * cmap
    return VisualizationMap(mode=mode, hint=hint, overlay=overlay, n_top=n_top)


def render(
    vis: VisualizationMap,
    base_image: np.ndarray,
    out_path: str,
    opacity: float = 0.5,
    color: tuple[int, int, int] = (255, 64, 32),
) -> None:
    """Write ``base_image`` with the overlay alpha-blended on top, as PNG.

    Detection overlays upsample nearest (crisp blocks), density overlays
    bilinear. Pixels with zero overlay are copied through untouched, so a zero
    overlay reproduces the base image byte for byte; identical inputs always
    produce identical files.
    """
    base = np.asarray(base_image)
    if base.dtype != np.uint8:
        base = np.clip(np.floor(base * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = base.shape[:2]
    if vis.mode == "detection":
        up = nearest_resize(vis.overlay, h, w)
    else:
        up = bilinear_resize(vis.overlay, h, w)
    peak = up.max()
    alpha = (up / peak if peak > 0 else up) * float(opacity)
    alpha = alpha[:, :, None]
    col = np.array(color, dtype=np.float64)[None, None, :]
    blended = base.astype(np.float64) + alpha * (col - base.astype(np.float64))
    out = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(out, mode="RGB").save(out_path, format="PNG")
