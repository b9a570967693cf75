"""Supervised training: gated L1 loss, mosaic augmentation, and the fit loop.

During training every branch produces a raw count map, but only the branch
whose scale interval contains the sample's exemplar scale prior enters the
loss; the other branches receive exactly zero gradient. Inference later picks
that same branch, so each branch specializes to its scale band.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .counter import RedundantCountMap
from .data import Sample, crop_training_patch
from .density import density_from_dots, redundant_gt
from .geometry import branch_select, build_exemplar_set
from .metrics import MetricsReport, compute_metrics
from .model import CountingModel
from .optim import AdamW, OneCycleSchedule
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries the failing step index."""

    def __init__(self, step: int, epoch: int):
        super().__init__(f"non-finite loss at step {step} (epoch {epoch})")
        self.step = step
        self.epoch = epoch


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 1
    weight_decay: float = 1e-4
    warmup_frac: float = 0.3
    lr_floor_div: float = 1e4
    mosaic_prob: float = 0.5
    sigma_divisor: float = 4.0  # density kernel width: sigma = max(1, s / divisor)
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def to_dict(self) -> dict:
        return asdict(self)


def tiny_train_config(epochs: int = 30, seed: int = 0) -> TrainConfig:
    """Training preset matched to the tiny model: short schedule, hotter LR."""
    return TrainConfig(base_lr=1e-3, epochs=epochs, weight_decay=1e-4, mosaic_prob=0.3, seed=seed)


def gated_l1_loss(
    preds: dict[int, RedundantCountMap],
    gts: dict[int, RedundantCountMap],
    s: float,
    thresholds: list[float],
) -> Tensor:
    """Mean absolute error over the selected branch's window grid.

    Non-selected branches contribute nothing: neither to the value nor to any
    gradient, because their tensors never enter the loss graph.
    """
    for i, pred in preds.items():
        if i not in gts:
            raise ValueError(f"no ground truth for branch {i}")
        if pred.geometry != gts[i].geometry:
            raise ValueError(
                f"branch {i}: prediction geometry {pred.geometry} != gt {gts[i].geometry}"
            )
    sel = branch_select(s, thresholds) - 1
    if sel not in preds:
        raise ValueError(f"selected branch {sel} missing from predictions")
    pred = preds[sel]
    if pred.tensor is None:
        raise ValueError("prediction map carries no graph tensor")
    diff = T.sub(pred.tensor, Tensor(gts[sel].values))
    return T.tmean(T.tabs(diff))


def mosaic_augment(
    current: Sample, pool: list[Sample], rng: np.random.Generator, size: Optional[int] = None
) -> Sample:
    """2x2 mosaic: the current image keeps one random quadrant and its labels.

    The kept quadrant is a crop of the current image chosen to contain all
    exemplar boxes (so the boxes stay valid); the other three quadrants are
    crops of different-category pool images and contribute zero dots. Returns
    the current sample unchanged when the pool is empty or no placement fits.
    """
    if not pool:
        return current
    h, w = current.image.shape[:2]
    size = size or min(h, w)
    q = size // 2
    # the union of the exemplar boxes must fit inside a q x q crop
    bx = np.array(current.boxes, dtype=np.float64)
    ux1, uy1 = bx[:, 0].min(), bx[:, 1].min()
    ux2, uy2 = bx[:, 2].max(), bx[:, 3].max()
    if ux2 - ux1 > q or uy2 - uy1 > q or h < q or w < q:
        return current
    lo_x = int(max(0, np.ceil(ux2 - q)))
    hi_x = int(min(w - q, np.floor(ux1)))
    lo_y = int(max(0, np.ceil(uy2 - q)))
    hi_y = int(min(h - q, np.floor(uy1)))
    if hi_x < lo_x or hi_y < lo_y:
        return current
    x0 = int(rng.integers(lo_x, hi_x + 1))
    y0 = int(rng.integers(lo_y, hi_y + 1))

    quadrant = int(rng.integers(0, 4))
    out = np.zeros((size, size, 3), dtype=np.float64)
    corners = [(0, 0), (0, q), (q, 0), (q, q)]
    donors = [p for p in pool if p.category != current.category]
    if not donors:
        return current
    for qi, (oy, ox) in enumerate(corners):
        if qi == quadrant:
            out[oy : oy + q, ox : ox + q] = current.image[y0 : y0 + q, x0 : x0 + q]
            continue
        donor = donors[int(rng.integers(0, len(donors)))]
        dh, dw = donor.image.shape[:2]
        if dh < q or dw < q:
            return current
        dy = int(rng.integers(0, dh - q + 1))
        dx = int(rng.integers(0, dw - q + 1))
        out[oy : oy + q, ox : ox + q] = donor.image[dy : dy + q, dx : dx + q]

    oy, ox = corners[quadrant]
    shift = np.array([ox - x0, oy - y0], dtype=np.float64)
    pts = current.points
    if len(pts):
        keep = (
            (pts[:, 0] >= x0) & (pts[:, 0] < x0 + q) & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + q)
        )
        pts = pts[keep] + shift
    boxes = [(b[0] + shift[0], b[1] + shift[1], b[2] + shift[0], b[3] + shift[1]) for b in current.boxes]
    return Sample(image=out, points=pts.copy(), boxes=boxes, category=current.category)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float
    val_rmse: float
    val_r2: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    history: list[EpochRecord]
    best_state: dict[str, np.ndarray]
    final_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_mae: float


def predict_counts(
    model: CountingModel, samples: list[Sample], exemplar_index: Optional[int] = None
) -> tuple[np.ndarray, np.ndarray]:
    """(predictions, ground truths) over ``samples`` via the inference path."""
    preds, gts = [], []
    for s in samples:
        exset = build_exemplar_set(s.exemplar_image, s.boxes, model.config.exemplar_size)
        if exemplar_index is not None:
            exset = exset.subset(exemplar_index % len(exset))
        preds.append(model.infer(s.image, exset).count)
        gts.append(float(len(s.points)))
    return np.asarray(preds), np.asarray(gts)


def evaluate(model: CountingModel, samples: list[Sample]) -> MetricsReport:
    preds, gts = predict_counts(model, samples)
    return compute_metrics(preds, gts)


def _train_step(
    model: CountingModel, sample: Sample, mosaic_pool: list[Sample], mosaic_prob: float,
    rng: np.random.Generator, sigma_divisor: float = 4.0,
) -> tuple[Tensor, float]:
    cfg = model.config
    if mosaic_pool and rng.random() < mosaic_prob:
        sample = mosaic_augment(sample, mosaic_pool, rng, size=cfg.image_size)
    if sample.image.shape[:2] != (cfg.image_size, cfg.image_size):
        sample = crop_training_patch(sample, cfg.image_size, rng)
    exset = build_exemplar_set(sample.exemplar_image, sample.boxes, cfg.exemplar_size)
    s = exset.scale_prior
    density = density_from_dots(sample.points, sample.image.shape[:2], s, sigma_divisor)
    maps, _, grid = model.forward_branches(sample.image, exset, mode="train")
    gts = {
        i: redundant_gt(density, geo) for i, geo in enumerate(model.geometries(grid))
    }
    loss = gated_l1_loss(maps, gts, s, cfg.branch_thresholds)
    return loss, s


def fit(
    train_samples: list[Sample],
    val_samples: list[Sample],
    model: CountingModel,
    config: TrainConfig,
    out_dir: Optional[str | Path] = None,
    checkpoint_cb: Optional[Callable[[str, dict], None]] = None,
    start_epoch: int = 0,
    end_epoch: Optional[int] = None,
    optimizer: Optional[AdamW] = None,
    stop_fn: Optional[Callable[[EpochRecord], bool]] = None,
) -> FitResult:
    """Optimize the model on dot-annotated samples; log per-epoch validation.

    Deterministic given (config.seed, dataset order): every epoch draws its
    own generator from (seed, epoch), so resuming at epoch E replays the exact
    stream the uninterrupted run would have seen. ``end_epoch`` trains only a
    prefix of the configured schedule (for budgeted runs that resume later);
    ``stop_fn`` ends training early once an epoch record satisfies it.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    for i, s in enumerate(train_samples):
        if not s.boxes:
            raise ValueError(f"training sample {i} has no exemplar boxes")
    opt = optimizer or AdamW(model.parameters(), weight_decay=config.weight_decay)
    steps_per_epoch = len(train_samples)
    schedule = OneCycleSchedule(
        config.base_lr,
        total_steps=config.epochs * steps_per_epoch,
        warmup_frac=config.warmup_frac,
        floor_div=config.lr_floor_div,
    )
    by_cat: dict[str, list[Sample]] = {}
    for s in train_samples:
        by_cat.setdefault(s.category, []).append(s)

    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a", encoding="utf-8")

    history: list[EpochRecord] = []
    best_state = model.state_arrays()
    best_mae = float("inf")
    best_epoch = -1
    last_epoch = config.epochs if end_epoch is None else min(end_epoch, config.epochs)
    try:
        for epoch in range(start_epoch, last_epoch):
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(len(train_samples))
            losses = []
            lr = schedule.lr(epoch * steps_per_epoch)
            for si, idx in enumerate(order):
                step = epoch * steps_per_epoch + si
                sample = train_samples[idx]
                pool = [s for c, ss in by_cat.items() if c != sample.category for s in ss]
                try:
                    loss, _ = _train_step(model, sample, pool, config.mosaic_prob, rng,
                                          config.sigma_divisor)
                except FloatingPointError as e:
                    raise TrainingDiverged(step, epoch) from e
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(step, epoch)
                model.zero_grad()
                loss.backward()
                lr = schedule.lr(step)
                opt.step(lr)
                losses.append(float(loss.data))
            rep = evaluate(model, val_samples) if val_samples else None
            rec = EpochRecord(
                epoch=epoch,
                lr=lr,
                train_loss=float(np.mean(losses)),
                val_mae=rep.mae if rep else float("nan"),
                val_rmse=rep.rmse if rep else float("nan"),
                val_r2=rep.r2 if rep else None,
            )
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps({"type": "epoch", **rec.to_dict()}) + "\n")
                log_fh.flush()
            if rep and rep.mae < best_mae:
                best_mae = rep.mae
                best_epoch = epoch
                best_state = model.state_arrays()
                if checkpoint_cb:
                    checkpoint_cb("best", {"epoch": epoch, "val_mae": rep.mae})
            if checkpoint_cb:
                checkpoint_cb("last", {"epoch": epoch, "opt": opt})
            if stop_fn and stop_fn(rec):
                break
    finally:
        if log_fh:
            log_fh.close()
    return FitResult(
        history=history,
        best_state=best_state,
        final_state=model.state_arrays(),
        best_epoch=best_epoch,
        best_val_mae=best_mae,
    )
