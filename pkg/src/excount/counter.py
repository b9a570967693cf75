"""Token-level local counting windows and the multi-branch box-aware counter.

A counting window covers k x k pixels = k_p x k_p tokens and steps by z px =
z_p tokens. With k > z adjacent windows overlap, so each instance is counted
by several windows; the normalizer undoes that redundancy later. Each branch
owns a block size k and disjoint parameters: a 3x3 "slack" convolution that
adapts the shared features to its scale, then window average pooling and a
linear head producing one local count per window.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .geometry import ExemplarSet, branch_select
from .tensor import Tensor


@dataclass(frozen=True)
class WindowGeometry:
    """One branch's window geometry, in pixels and in tokens."""

    k: int  # block size, px
    z: int  # output stride, px
    patch: int  # token size, px
    grid: tuple[int, int]  # token grid the windows slide over

    def __post_init__(self):
        if self.k % self.patch or self.z % self.patch:
            raise ValueError(f"k={self.k}, z={self.z} must be multiples of patch {self.patch}")
        if self.k_p < 1 or self.z_p < 1:
            raise ValueError(f"window must be >= 1 token: k_p={self.k_p}, z_p={self.z_p}")
        if self.k_p > min(self.grid):
            raise ValueError(f"window of {self.k_p} tokens exceeds grid {self.grid}")

    @property
    def k_p(self) -> int:
        return self.k // self.patch

    @property
    def z_p(self) -> int:
        return self.z // self.patch

    @property
    def grid_out(self) -> tuple[int, int]:
        return (
            (self.grid[0] - self.k_p) // self.z_p + 1,
            (self.grid[1] - self.k_p) // self.z_p + 1,
        )

    def window_origin(self, j: tuple[int, int]) -> tuple[int, int]:
        return (self.z_p * j[0], self.z_p * j[1])


def window_grid(grid_h: int, grid_w: int, k_p: int, z_p: int) -> list[tuple[int, int]]:
    """Window indices (j_y, j_x), row-major; window j starts at token z_p * j.

    Windows that would extend past the grid are dropped (valid mode).
    """
    if k_p > min(grid_h, grid_w):
        raise ValueError(f"window of {k_p} tokens exceeds grid {grid_h}x{grid_w}")
    ny = (grid_h - k_p) // z_p + 1
    nx = (grid_w - k_p) // z_p + 1
    return [(jy, jx) for jy in range(ny) for jx in range(nx)]


def redundancy_overlap(
    j: tuple[int, int], j2: tuple[int, int], geometry: WindowGeometry
) -> set[tuple[int, int]]:
    """Exact set of tokens shared by windows ``j`` and ``j2``.

    Empty iff the windows are farther apart than floor(k_p / z_p) in
    chebyshev distance on the window grid.
    """
    out = geometry.grid_out
    for jj in (j, j2):
        if not (0 <= jj[0] < out[0] and 0 <= jj[1] < out[1]):
            raise ValueError(f"window index {jj} outside window grid {out}")
    k_p, z_p = geometry.k_p, geometry.z_p

    def tokens(jj):
        oy, ox = geometry.window_origin(jj)
        return {(oy + u, ox + v) for u in range(k_p) for v in range(k_p)}

    return tokens(j) & tokens(j2)


@dataclass
class RedundantCountMap:
    """Per-window local counts on one branch's window grid.

    ``values`` mirrors ``tensor.data`` when the map came out of the model; the
    tensor is kept so the training loss can backpropagate through it.
    """

    values: np.ndarray
    geometry: WindowGeometry
    branch: int
    tensor: Optional[Tensor] = None

    def __post_init__(self):
        if self.values.shape != self.geometry.grid_out:
            raise ValueError(
                f"count map {self.values.shape} does not match window grid {self.geometry.grid_out}"
            )
        if not np.isfinite(self.values).all():
            raise ValueError("count map contains non-finite values")


class BranchCounter:
    """Parameters of one counting branch (slack conv + linear head)."""

    def __init__(self, index: int, dim: int, rng: np.random.Generator):
        self.index = index
        self.params: dict[str, Tensor] = {}
        fan_in = 9 * (dim + 1)
        prefix = f"branches.{index}"
        self.slack_w = Tensor(
            rng.uniform(-1, 1, size=(3, 3, dim + 1, dim)) / np.sqrt(fan_in), requires_grad=True
        )
        self.slack_b = Tensor(np.zeros(dim), requires_grad=True)
        self.head_w = Tensor(rng.uniform(-1, 1, size=(dim, 1)) / np.sqrt(dim), requires_grad=True)
        self.head_b = Tensor(np.zeros(1), requires_grad=True)
        self.params = {
            f"{prefix}.slack.weight": self.slack_w,
            f"{prefix}.slack.bias": self.slack_b,
            f"{prefix}.head.weight": self.head_w,
            f"{prefix}.head.bias": self.head_b,
        }


def count_branch(
    enhanced: Tensor,
    branch: BranchCounter,
    geometry: WindowGeometry,
    rectify: bool,
) -> RedundantCountMap:
    """One branch's redundant count map from the enhanced token grid.

    ``enhanced`` is [H_t, W_t, dim+1]. Pipeline: slack conv -> GELU -> k_p
    average pool with stride z_p -> linear head; ReLU rectification applies at
    inference only so training gradients are never clamped dead at zero.
    """
    if enhanced.data.ndim != 3 or enhanced.shape[:2] != geometry.grid:
        raise ValueError(f"enhanced grid {enhanced.shape} does not match geometry {geometry.grid}")
    x = T.conv2d_3x3(enhanced, branch.slack_w, branch.slack_b)
    x = T.gelu(x)
    x = T.avg_pool2d(x, geometry.k_p, geometry.z_p)
    ho, wo, d = x.shape
    flat = T.reshape(x, (ho * wo, d))
    y = T.add(T.matmul(flat, branch.head_w), branch.head_b)
    y = T.reshape(y, (ho, wo))
    if rectify:
        y = T.relu(y)
    return RedundantCountMap(values=y.data, geometry=geometry, branch=branch.index, tensor=y)


def count_multibranch(
    enhanced: Tensor,
    exemplars: ExemplarSet,
    branches: list[BranchCounter],
    geometries: list[WindowGeometry],
    thresholds: list[float],
    mode: str,
) -> dict[int, RedundantCountMap]:
    """Evaluate counting branches: all of them in train mode, one at inference.

    Inference picks the branch whose scale interval contains the exemplar
    scale prior and rectifies its output; train mode returns raw maps for all
    branches (the loss gates which one backpropagates).
    """
    if mode == "train":
        return {
            b.index: count_branch(enhanced, b, g, rectify=False)
            for b, g in zip(branches, geometries)
        }
    if mode == "infer":
        idx = branch_select(exemplars.scale_prior, thresholds) - 1
        b = branches[idx]
        return {b.index: count_branch(enhanced, b, geometries[idx], rectify=True)}
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
