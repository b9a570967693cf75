"""Exemplar-conditioned object counting with token-level local count regression."""

from .config import ModelConfig, tiny_config, mixed_scale_config
from .counter import RedundantCountMap, WindowGeometry, window_grid, redundancy_overlap
from .data import AnnotatedImage, Sample, SynthConfig, synth_scene
from .density import DensityMap, density_from_dots, redundant_gt
from .encoder import DecoupledAttention, TokenSequence, decouple_attention
from .geometry import (
    BranchThresholds,
    ExemplarBox,
    ExemplarSet,
    branch_select,
    build_exemplar_set,
    magnitude_embedding,
    scale_embedding,
    scale_prior,
)
from .gradcheck import GradReport, grad_check
from .metrics import MetricsReport, compute_metrics, stratify_by_exemplar_scale, throughput
from .model import CountingModel, InferenceResult
from .normalizer import NormalizedCountMap, image_count, normalize, normalize_naive
from .tensor import Tensor
from .training import TrainConfig, fit, gated_l1_loss, mosaic_augment
from .visualizer import VisualizationMap, render, visualize

__version__ = "0.1.0"
