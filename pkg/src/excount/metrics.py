"""Counting evaluation metrics and throughput measurement.

MAE and RMSE are the headline numbers; weighted counting accuracy
(1 - sum|error| / sum truth) and R-squared gauge practical value; the signed
mean percentage error diagnoses systematic over/under-estimation. Degenerate
denominators (zero total truth, zero truth variance) make WCA or R-squared
undefined: they are reported as absent rather than invented.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


@dataclass
class MetricsReport:
    m: int
    mae: float
    rmse: float
    wca: Optional[float]
    r2: Optional[float]
    mpe: float
    mpe_abs: float
    stratum: Optional[str] = None
    per_category: Optional[dict[str, "MetricsReport"]] = None
    ratios: Optional[list[float]] = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("a metrics report needs at least one sample")
        if not (self.rmse >= self.mae >= 0):
            raise ValueError(f"expected RMSE >= MAE >= 0, got {self.rmse}, {self.mae}")
        if self.wca is not None and self.wca > 1 + 1e-12:
            raise ValueError(f"WCA must be <= 1, got {self.wca}")
        if self.r2 is not None and self.r2 > 1 + 1e-12:
            raise ValueError(f"R2 must be <= 1, got {self.r2}")

    def format_line(self) -> str:
        wca = f"{self.wca:.4f}" if self.wca is not None else "n/a"
        r2 = f"{self.r2:.4f}" if self.r2 is not None else "n/a"
        tag = f" [{self.stratum}]" if self.stratum else ""
        return (
            f"M={self.m} MAE={self.mae:.4f} RMSE={self.rmse:.4f} "
            f"WCA={wca} R2={r2} MPE={self.mpe:+.4f} |MPE|={self.mpe_abs:.4f}{tag}"
        )

    def to_dict(self) -> dict:
        d = {
            "m": self.m,
            "mae": self.mae,
            "rmse": self.rmse,
            "wca": self.wca,
            "r2": self.r2,
            "mpe": self.mpe,
            "mpe_abs": self.mpe_abs,
        }
        if self.stratum:
            d["stratum"] = self.stratum
        if self.per_category:
            d["per_category"] = {k: v.to_dict() for k, v in self.per_category.items()}
        return d


def compute_metrics(
    preds, gts, eps: float = 1e-6, stratum: Optional[str] = None, with_ratios: bool = False
) -> MetricsReport:
    """MAE, RMSE, WCA, R-squared, and signed MPE over paired counts."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    c = np.asarray(gts, dtype=np.float64).reshape(-1)
    if p.size != c.size or p.size == 0:
        raise ValueError(f"need equal nonzero lengths, got {p.size} and {c.size}")
    err = p - c
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    total = c.sum()
    wca = float(1.0 - np.abs(err).sum() / total) if total > 0 else None
    var = ((c - c.mean()) ** 2).sum()
    r2 = float(1.0 - (err**2).sum() / var) if var > 0 else None
    mpe = float((err / (c + eps)).mean())
    ratios = None
    if with_ratios:
        ratios = [float(v) for v in p / (c + eps)]
    return MetricsReport(
        m=p.size, mae=mae, rmse=rmse, wca=wca, r2=r2, mpe=mpe, mpe_abs=abs(mpe),
        stratum=stratum, ratios=ratios,
    )


def stratify_by_exemplar_scale(
    scale_priors,
    preds,
    gts,
    small_max: float = 32.0,
    large_min: float = 96.0,
) -> tuple[Optional[MetricsReport], Optional[MetricsReport]]:
    """Metrics over the small-exemplar (s < small_max) and large-exemplar
    (s > large_min) strata; an empty stratum is reported as absent."""
    s = np.asarray(scale_priors, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    c = np.asarray(gts, dtype=np.float64)
    if not (s.size == p.size == c.size):
        raise ValueError("scale priors, preds, and gts must align")
    small_idx = s < small_max
    large_idx = s > large_min
    small = (
        compute_metrics(p[small_idx], c[small_idx], stratum="small-exemplar", with_ratios=True)
        if small_idx.any()
        else None
    )
    large = (
        compute_metrics(p[large_idx], c[large_idx], stratum="large-exemplar", with_ratios=True)
        if large_idx.any()
        else None
    )
    return small, large


@dataclass
class ThroughputReport:
    fps: float
    ms_per_frame: float
    iters: int
    all_ms: list[float] = field(default_factory=list)

    def format_line(self) -> str:
        return f"throughput: {self.fps:.2f} FPS ({self.ms_per_frame:.2f} ms/frame, {self.iters} iters)"


def throughput(infer_fn: Callable[[], object], warmup: int = 3, iters: int = 10) -> ThroughputReport:
    """Median single-image inference speed. Run single-threaded for comparability."""
    if iters < 10:
        raise ValueError(f"need iters >= 10 for a stable median, got {iters}")
    for _ in range(warmup):
        infer_fn()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        infer_fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    med = float(np.median(times))
    return ThroughputReport(fps=1000.0 / med, ms_per_frame=med, iters=iters, all_ms=times)
