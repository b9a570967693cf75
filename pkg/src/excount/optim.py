"""Adaptive-moment optimizer with decoupled weight decay, plus the LR schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay.

    Parameters with no gradient (e.g. branches gated out of the loss) are
    skipped entirely: their moments and values stay untouched.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        weight_decay: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.exp_avg = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.exp_avg_sq = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.seen = {n: 0 for n in params}  # per-param step for bias correction

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self.seen[name] += 1
            t = self.seen[name]
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)

    # -- state for resumable training -------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"opt/m/{n}"] = self.exp_avg[n].copy()
            out[f"opt/v/{n}"] = self.exp_avg_sq[n].copy()
            out[f"opt/t/{n}"] = np.array([self.seen[n]], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.params:
            self.exp_avg[n] = np.asarray(arrays[f"opt/m/{n}"], dtype=np.float64).copy()
            self.exp_avg_sq[n] = np.asarray(arrays[f"opt/v/{n}"], dtype=np.float64).copy()
            self.seen[n] = int(arrays[f"opt/t/{n}"][0])


class OneCycleSchedule:
    """Linear warmup to the base rate, then cosine decay to a small floor.

    Warmup covers ``warmup_frac`` of all steps (rate grows linearly from
    base/W up to base); the remaining steps follow a half-cosine from base
    down to base / floor_div at the final step.
    """

    def __init__(
        self,
        base_lr: float,
        total_steps: int,
        warmup_frac: float = 0.3,
        floor_div: float = 1e4,
    ):
        if base_lr <= 0 or total_steps < 1:
            raise ValueError(f"bad schedule: base_lr={base_lr}, total_steps={total_steps}")
        if not (0.0 <= warmup_frac < 1.0):
            raise ValueError(f"warmup_frac must be in [0, 1), got {warmup_frac}")
        self.base_lr = base_lr
        self.total_steps = total_steps
        self.warmup_steps = int(round(warmup_frac * total_steps))
        self.floor = base_lr / floor_div

    def lr(self, step: int) -> float:
        if step < 0 or step >= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps})")
        w = self.warmup_steps
        if step < w:
            return self.base_lr * (step + 1) / w
        span = max(1, self.total_steps - 1 - w)
        prog = (step - w) / span
        return self.floor + 0.5 * (self.base_lr - self.floor) * (1.0 + math.cos(math.pi * prog))
