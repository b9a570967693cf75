"""Full counting model: encoder, counting branches, and the inference path."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import ModelConfig
from .counter import BranchCounter, RedundantCountMap, WindowGeometry, count_multibranch
from .encoder import DecoupledAttention, Encoder
from .geometry import ExemplarSet, branch_select
from .normalizer import NormalizedCountMap, image_count, normalize
from .tensor import Tensor


@dataclass
class InferenceResult:
    count: float
    count_map: NormalizedCountMap
    redundant: RedundantCountMap
    branch: int  # 1-based branch index that served the request
    attention: DecoupledAttention
    magnitude: float


class CountingModel:
    """Encoder plus one BranchCounter per block size.

    Weights are plain Tensors; training mutates them and must be serialized
    per instance, while inference on frozen weights may run concurrently.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config, rng)
        self.branches = [BranchCounter(i, config.dim, rng) for i in range(len(config.branch_ks))]

    # -- parameter plumbing ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.encoder.params)
        for b in self.branches:
            params.update(b.params)
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def branch_parameters(self, index: int) -> dict[str, Tensor]:
        """Parameters owned by one branch (0-based), disjoint across branches."""
        return dict(self.branches[index].params)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def geometries(self, grid: tuple[int, int]) -> list[WindowGeometry]:
        cfg = self.config
        return [WindowGeometry(k=k, z=cfg.stride, patch=cfg.patch_size, grid=grid) for k in cfg.branch_ks]

    # -- forward paths ----------------------------------------------------------

    def forward_branches(
        self, image: np.ndarray, exemplars: ExemplarSet, mode: str
    ) -> tuple[dict[int, RedundantCountMap], DecoupledAttention, tuple[int, int]]:
        seq = self.encoder.tokenize_joint(image, exemplars)
        features, attn = self.encoder.encode(seq, exemplars.magnitude)
        grid_feats = features.reshape(seq.grid[0], seq.grid[1], self.config.dim + 1)
        maps = count_multibranch(
            grid_feats,
            exemplars,
            self.branches,
            self.geometries(seq.grid),
            self.config.branch_thresholds,
            mode,
        )
        return maps, attn, seq.grid

    def infer(self, image: np.ndarray, exemplars: ExemplarSet) -> InferenceResult:
        """Single-branch inference: redundant map -> normalizer -> image count."""
        maps, attn, _ = self.forward_branches(image, exemplars, mode="infer")
        idx, rmap = next(iter(maps.items()))
        cmap = normalize(rmap)
        return InferenceResult(
            count=image_count(cmap),
            count_map=cmap,
            redundant=rmap,
            branch=idx + 1,
            attention=attn,
            magnitude=exemplars.magnitude,
        )

    def selected_branch(self, exemplars: ExemplarSet) -> int:
        return branch_select(exemplars.scale_prior, self.config.branch_thresholds)

    # -- state ---------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)[:4]} ...")
        for name, t in params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {a.shape} vs {t.data.shape}")
            t.data = a.copy()
            t.grad = None
