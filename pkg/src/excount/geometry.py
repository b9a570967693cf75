"""Everything derived from exemplar box geometry.

An exemplar is a user-supplied bounding box cropping one instance of the
target category. From 1-3 of those boxes we compute:

* per-exemplar scale-embedding maps that let the resized patch remember its
  original height/width (``scale_embedding``),
* a scalar magnitude: the mean area ratio between the resize target and the
  original boxes (``magnitude_embedding``),
* a scalar scale prior estimating instance size in pixels (``scale_prior``),
* the counting-branch index that scale prior selects (``branch_select``).

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imageops import bilinear_resize

MAX_EXEMPLARS = 3


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ExemplarBox:
    """Axis-aligned box in pixel coordinates of the resized full image.

    Fractional coordinates are rounded to the nearest pixel (ties up) before
    width/height are taken; the rounded box must be at least 1 px on each side.
    """

    x1: int
    y1: int
    x2: int
    y2: int

    @classmethod
    def from_coords(cls, x1: float, y1: float, x2: float, y2: float) -> "ExemplarBox":
        b = cls(
            _round_half_up(x1), _round_half_up(y1), _round_half_up(x2), _round_half_up(y2)
        )
        b.validate()
        return b

    def validate(self) -> None:
        if self.x2 - self.x1 < 1 or self.y2 - self.y1 < 1:
            raise ValueError(f"exemplar box must be >= 1 px per side: {self}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1


@dataclass(frozen=True)
class BranchThresholds:
    """Scale boundaries splitting (0, inf) into per-branch intervals.

    Two thresholds give the three-branch split (0, s1], (s1, s2], (s2, inf);
    the last interval is unbounded so every scale maps to some branch.
    """

    s1: float = 32.0
    s2: float = 64.0

    def __post_init__(self):
        if not (0.0 < self.s1 < self.s2):
            raise ValueError(f"thresholds must satisfy 0 < s1 < s2, got {self.s1}, {self.s2}")

    def as_list(self) -> list[float]:
        return [self.s1, self.s2]


def scale_embedding(h_i: int, w_i: int, h: int, w: int) -> np.ndarray:
    """Map S with S[m, n] = m * (h / h_i) + n * (w / w_i) on an h x w grid.

    Encodes the pre-resize box size and aspect ratio of one exemplar; rows
    grow with the height ratio, columns with the width ratio, S[0, 0] = 0.
    """
    for name, v in (("h_i", h_i), ("w_i", w_i), ("h", h), ("w", w)):
        if int(v) != v or v <= 0:
            raise ValueError(f"scale_embedding: {name} must be a positive integer, got {v}")
    rows = np.arange(h, dtype=np.float64)[:, None] * (h / h_i)
    cols = np.arange(w, dtype=np.float64)[None, :] * (w / w_i)
    return rows + cols


def magnitude_embedding(boxes: list[ExemplarBox], h: int, w: int) -> float:
    """Mean area-resize factor (1/l) * sum_i (w*h) / (w_i*h_i)."""
    if not boxes:
        raise ValueError("magnitude_embedding: need at least one exemplar box")
    for b in boxes:
        b.validate()
    return float(sum((w * h) / (b.width * b.height) for b in boxes) / len(boxes))


def scale_prior(boxes: list[ExemplarBox]) -> float:
    """Scalar instance-scale estimate (1/l) * sqrt(sum_i h_i * sum_i w_i)."""
    if not boxes:
        raise ValueError("scale_prior: need at least one exemplar box")
    sh = sum(b.height for b in boxes)
    sw = sum(b.width for b in boxes)
    return float(math.sqrt(sh * sw) / len(boxes))


def branch_select(s: float, thresholds: BranchThresholds | list[float]) -> int:
    """Branch index in {1, .., n+1} for scale ``s``; intervals are right-closed.

    With thresholds [s1, s2]: branch 1 for s <= s1, branch 2 for s1 < s <= s2,
    branch 3 otherwise. An empty threshold list always returns branch 1.
    """
    if s <= 0:
        raise ValueError(f"branch_select: scale must be positive, got {s}")
    ts = thresholds.as_list() if isinstance(thresholds, BranchThresholds) else list(thresholds)
    for i, t in enumerate(ts):
        if s <= t:
            return i + 1
    return len(ts) + 1


@dataclass
class ExemplarSet:
    """Resized exemplar patches plus the geometry scalars derived from their boxes.

    ``patches`` are float rasters resized (bilinear) to patch_hw x patch_hw;
    ``scale_maps`` carry one scale embedding per patch. ``magnitude`` and
    ``scale_prior`` are recomputed from the boxes on construction, so the set
    is self-consistent by definition.
    """

    boxes: list[ExemplarBox]
    patches: list[np.ndarray]
    scale_maps: list[np.ndarray] = field(default_factory=list)
    magnitude: float = 0.0
    scale_prior: float = 0.0
    patch_hw: int = 64

    def __post_init__(self):
        if not (1 <= len(self.boxes) <= MAX_EXEMPLARS):
            raise ValueError(f"exemplar count must be in [1, {MAX_EXEMPLARS}], got {len(self.boxes)}")
        if len(self.patches) != len(self.boxes):
            raise ValueError("one patch per box required")
        hw = self.patch_hw
        if not self.scale_maps:
            self.scale_maps = [
                scale_embedding(b.height, b.width, hw, hw) for b in self.boxes
            ]
        self.magnitude = magnitude_embedding(self.boxes, hw, hw)
        self.scale_prior = scale_prior(self.boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    def subset(self, index: int) -> "ExemplarSet":
        """Single-exemplar view, used by the 1-shot evaluation protocol."""
        return ExemplarSet(
            boxes=[self.boxes[index]],
            patches=[self.patches[index]],
            patch_hw=self.patch_hw,
        )


def build_exemplar_set(
    image: np.ndarray, boxes: list[ExemplarBox] | list[tuple], patch_hw: int = 64
) -> ExemplarSet:
    """Crop each box from ``image`` (float [H, W, 3]) and resize to patch_hw."""
    h, w = image.shape[:2]
    norm: list[ExemplarBox] = []
    for b in boxes:
        box = b if isinstance(b, ExemplarBox) else ExemplarBox.from_coords(*b)
        if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
            raise ValueError(f"exemplar box {box} outside image {w}x{h}")
        norm.append(box)
    patches = [
        bilinear_resize(image[b.y1 : b.y2, b.x1 : b.x2], patch_hw, patch_hw) for b in norm
    ]
    return ExemplarSet(boxes=norm, patches=patches, patch_hw=patch_hw)
