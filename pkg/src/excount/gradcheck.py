"""Finite-difference verification of backward passes.

The checker treats the autodiff graph as a black box: it evaluates the scalar
function twice per probed coordinate (central differences) and compares the
quotient against the accumulated ``grad``. Probing every coordinate of a large
model is wasteful, so ``max_coords`` caps the number of probes per parameter
(chosen by a seeded draw so reruns probe the same entries).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradReport:
    """Outcome of one gradient check."""

    op_name: str
    max_abs_error: float
    max_rel_error: float
    passed: bool
    detail: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = f"{status}  {self.op_name:<28s} max_rel={self.max_rel_error:.3e} max_abs={self.max_abs_error:.3e}"
        return line + (f"  [{self.detail}]" if self.detail else "")


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    op_name: str = "f",
    max_coords: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare reverse-mode gradients of ``f(params)`` to central differences.

    ``f`` must be deterministic and return a scalar Tensor. ``eps`` is the
    half-step of the central difference (f(x+eps) - f(x-eps)) / (2 eps).
    Relative error uses max(|fd|, |ad|, 1e-6) as the denominator so that
    near-zero gradients are judged on absolute error.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"grad_check: eps must be in (0, 1e-2], got {eps}")
    for p in params:
        p.zero_grad()
    out = f(params)
    if out.data.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    if not np.isfinite(out.data).all():
        return GradReport(op_name, np.inf, np.inf, False, "non-finite forward value")
    out.backward()

    rng = np.random.default_rng(seed)
    max_abs = 0.0
    max_rel = 0.0
    detail = ""
    for pi, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + eps
            hi = f(params).data
            flat[ci] = orig - eps
            lo = f(params).data
            flat[ci] = orig
            if not (np.isfinite(hi).all() and np.isfinite(lo).all()):
                return GradReport(
                    op_name, np.inf, np.inf, False, f"non-finite probe at param {pi} coord {ci}"
                )
            fd = (float(hi) - float(lo)) / (2.0 * eps)
            ad = float(analytic.reshape(-1)[ci])
            abs_err = abs(ad - fd)
            rel_err = abs_err / max(abs(fd), abs(ad), 1e-6)
            if abs_err > max_abs:
                max_abs = abs_err
            if rel_err > max_rel:
                max_rel = rel_err
                detail = f"param {pi} coord {ci}: ad={ad:.6e} fd={fd:.6e}"
    passed = max_rel < tol
    return GradReport(op_name, max_abs, max_rel, passed, detail if not passed else "")
