"""Model geometry configuration and the presets used by tests and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict


@dataclass
class ModelConfig:
    """Shape parameters of the encoder and counting branches.

    Window geometry is expressed at pixel level: each branch counts over
    k x k px blocks stepped by ``stride`` px; both must be multiples of the
    token patch size so the windows land on whole tokens.
    """

    image_size: int = 384
    exemplar_size: int = 64
    patch_size: int = 16
    depth: int = 12
    dim: int = 768
    heads: int = 12
    mlp_ratio: int = 4
    branch_ks: list[int] = field(default_factory=lambda: [32, 64, 128])
    stride: int = 16
    branch_thresholds: list[float] = field(default_factory=list)

    def __post_init__(self):
        p = self.patch_size
        if p < 1:
            raise ValueError(f"patch_size must be >= 1, got {p}")
        if self.image_size % p or self.exemplar_size % p:
            raise ValueError(
                f"image_size {self.image_size} and exemplar_size {self.exemplar_size} "
                f"must be divisible by patch_size {p}"
            )
        if self.stride % p:
            raise ValueError(f"stride {self.stride} must be divisible by patch_size {p}")
        for k in self.branch_ks:
            if k % p or k < p:
                raise ValueError(f"branch block size {k} must be a multiple of patch_size >= {p}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must divide into {self.heads} heads")
        if not self.branch_thresholds:
            # Block k is meant to sit slightly above the instance scale it serves,
            # so the default boundary between branch i and i+1 is k_i itself.
            self.branch_thresholds = [float(k) for k in self.branch_ks[:-1]]
        if len(self.branch_thresholds) != len(self.branch_ks) - 1:
            raise ValueError("need exactly one threshold between consecutive branches")

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def exemplar_tokens_per_side(self) -> int:
        return self.exemplar_size // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def tiny_config() -> ModelConfig:
    """Desk-scale preset: small enough to train and grad-check on a CPU."""
    return ModelConfig(
        image_size=128,
        exemplar_size=32,
        patch_size=16,
        depth=2,
        dim=64,
        heads=4,
        branch_ks=[32, 64, 128],
        stride=16,
    )


def mixed_scale_config(image_size: int = 192) -> ModelConfig:
    """Tiny-depth preset on a larger canvas, for scale-spanning experiments."""
    return ModelConfig(
        image_size=image_size,
        exemplar_size=32,
        patch_size=16,
        depth=2,
        dim=64,
        heads=4,
        branch_ks=[32, 64, 128],
        stride=16,
    )
