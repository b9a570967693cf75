"""Standard gradient-check suite: every differentiable op plus the full model.

Each check builds a small random problem, reduces it to a scalar with a fixed
random projection (so gradients are non-uniform), and compares reverse-mode
gradients against central finite differences. The full-model check runs the
actual training loss of the tiny preset and probes a seeded sample of
coordinates per parameter to stay fast.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .config import tiny_config
from .density import density_from_dots, redundant_gt
from .geometry import build_exemplar_set
from .gradcheck import GradReport, grad_check
from .model import CountingModel
from .tensor import Tensor
from .training import gated_l1_loss


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    # keeps |x| >= 0.05 so kinked ops (relu, abs) see clean finite differences
    return rng.uniform(0.05, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _proj_sum(x: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.mul(x, Tensor(w)))


def op_checks(seed: int, eps: float, tol: float) -> list[GradReport]:
    """Gradient checks for every differentiable primitive, one seed."""
    rng = np.random.default_rng(seed)
    reports: list[GradReport] = []

    def check(name: str, params: list[Tensor], f: Callable[[list[Tensor]], Tensor]):
        reports.append(grad_check(f, params, eps=eps, tol=tol, op_name=name, seed=seed))

    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    row = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    w34 = rng.normal(size=(3, 4))
    check("add", [a, b], lambda p: _proj_sum(T.add(p[0], p[1]), w34))
    check("sub", [a, b], lambda p: _proj_sum(T.sub(p[0], p[1]), w34))
    check("mul", [a, b], lambda p: _proj_sum(T.mul(p[0], p[1]), w34))
    check("add_broadcast", [a, row], lambda p: _proj_sum(T.add(p[0], p[1]), w34))
    check("scale", [a], lambda p: _proj_sum(T.scale(p[0], 1.7), w34))
    r = Tensor(_away_from_zero(rng, (4, 5)), requires_grad=True)
    w45 = rng.normal(size=(4, 5))
    check("relu", [r], lambda p: _proj_sum(T.relu(p[0]), w45))
    check("abs", [r], lambda p: _proj_sum(T.tabs(p[0]), w45))
    g = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    check("gelu", [g], lambda p: _proj_sum(T.gelu(p[0]), w45))

    ma = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    mb = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w32 = rng.normal(size=(3, 2))
    check("matmul", [ma, mb], lambda p: _proj_sum(T.matmul(p[0], p[1]), w32))
    ba = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    bb = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    w233 = rng.normal(size=(2, 3, 3))
    check("matmul_batched", [ba, bb], lambda p: _proj_sum(T.matmul(p[0], p[1]), w233))

    sx = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    w35 = rng.normal(size=(3, 5))
    check("softmax_rows", [sx], lambda p: _proj_sum(T.softmax_rows(p[0], 2.0), w35))
    ln_x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    ln_g = Tensor(rng.uniform(0.5, 1.5, size=6), requires_grad=True)
    ln_b = Tensor(rng.normal(size=6), requires_grad=True)
    w46 = rng.normal(size=(4, 6))
    check("layernorm", [ln_x, ln_g, ln_b], lambda p: _proj_sum(T.layernorm(p[0], p[1], p[2]), w46))

    cx = Tensor(rng.normal(size=(5, 6, 3)), requires_grad=True)
    cw = Tensor(rng.normal(size=(3, 3, 3, 2)) * 0.3, requires_grad=True)
    cb = Tensor(rng.normal(size=2), requires_grad=True)
    w562 = rng.normal(size=(5, 6, 2))
    check("conv2d_3x3", [cx, cw, cb], lambda p: _proj_sum(T.conv2d_3x3(p[0], p[1], p[2]), w562))
    px = Tensor(rng.normal(size=(6, 6, 2)), requires_grad=True)
    w332 = rng.normal(size=(3, 3, 2))
    check("avg_pool2d", [px], lambda p: _proj_sum(T.avg_pool2d(p[0], 2, 2), w332))

    c1 = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    c2 = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    w25 = rng.normal(size=(2, 5))
    check("concat", [c1, c2], lambda p: _proj_sum(T.concat([p[0], p[1]], axis=1), w25))
    nx = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w23 = rng.normal(size=(2, 3))
    check("narrow", [nx], lambda p: _proj_sum(T.narrow(T.narrow(p[0], 0, 1, 2), 1, 2, 3), w23))
    tx = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w432 = rng.normal(size=(4, 3, 2))
    check(
        "reshape_transpose",
        [tx],
        lambda p: _proj_sum(T.reshape(T.transpose(p[0], (2, 1, 0)), (4, 3, 2)), w432),
    )
    rx = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w4 = rng.normal(size=4)
    check("sum_axis", [rx], lambda p: _proj_sum(T.tsum(p[0], axis=0), w4))
    check("mean_axis", [rx], lambda p: _proj_sum(T.tmean(p[0], axis=0), w4))
    return reports


def full_model_check(
    seed: int, eps: float, tol: float, max_coords: int = 6
) -> GradReport:
    """Finite-difference check of the tiny model's gated training loss."""
    cfg = tiny_config()
    model = CountingModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    image = rng.uniform(0.0, 1.0, size=(cfg.image_size, cfg.image_size, 3))
    boxes = [(20.0, 24.0, 44.0, 46.0), (70.0, 60.0, 92.0, 84.0)]
    exset = build_exemplar_set(image, boxes, cfg.exemplar_size)
    dots = rng.uniform(10, cfg.image_size - 10, size=(6, 2))
    density = density_from_dots(dots, (cfg.image_size, cfg.image_size), exset.scale_prior)

    params = list(model.parameters().values())

    def loss_fn(_params):
        maps, _, grid = model.forward_branches(image, exset, mode="train")
        gts = {i: redundant_gt(density, g) for i, g in enumerate(model.geometries(grid))}
        return gated_l1_loss(maps, gts, exset.scale_prior, cfg.branch_thresholds)

    return grad_check(
        loss_fn, params, eps=eps, tol=tol, op_name="tiny_model_gated_loss",
        max_coords=max_coords, seed=seed,
    )


def buggy_op_check(seed: int, eps: float, tol: float) -> GradReport:
    """Negative control: an op whose backward is deliberately wrong must fail."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    w = rng.normal(size=(3, 3))

    def buggy_double(t: Tensor) -> Tensor:
        out = Tensor(t.data * 2.0)
        out.requires_grad = t.requires_grad
        out._parents = (t,)

        def _bw():
            t._accumulate(out.grad * 2.1)  # wrong on purpose: forward uses 2.0

        out._backward = _bw
        return out

    return grad_check(
        lambda p: _proj_sum(buggy_double(p[0]), w), [x], eps=eps, tol=tol,
        op_name="injected_bug", seed=seed,
    )


def run_all_checks(
    eps: float = 1e-5,
    tol: float = 1e-4,
    seeds: int = 5,
    max_coords: int = 6,
    inject_bug: bool = False,
) -> list[GradReport]:
    reports: list[GradReport] = []
    for seed in range(seeds):
        reports.extend(op_checks(seed, eps, tol))
        reports.append(full_model_check(seed, eps, tol, max_coords=max_coords))
    if inject_bug:
        reports.append(buggy_op_check(0, eps, tol))
    return reports
