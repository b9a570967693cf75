"""Optimizer behaviour and the one-cycle schedule shape."""

import numpy as np
import pytest

from excount import tensor as T
from excount.optim import AdamW, OneCycleSchedule
from excount.tensor import Tensor


class TestOneCycle:
    def test_endpoints(self):
        sched = OneCycleSchedule(base_lr=1e-4, total_steps=1000, warmup_frac=0.3)
        assert sched.lr(0) < 1e-6  # near zero at the start
        assert sched.lr(300) == pytest.approx(1e-4)  # peak at 30% of steps
        assert sched.lr(999) == pytest.approx(1e-8)  # floor at the final step

    def test_monotone_warmup_then_decay(self):
        sched = OneCycleSchedule(1e-3, 200, warmup_frac=0.25)
        lrs = [sched.lr(t) for t in range(200)]
        w = sched.warmup_steps
        assert all(a < b for a, b in zip(lrs[: w - 1], lrs[1:w]))
        assert all(a >= b for a, b in zip(lrs[w:-1], lrs[w + 1 :]))

    def test_out_of_range_step(self):
        sched = OneCycleSchedule(1e-4, 10)
        with pytest.raises(ValueError):
            sched.lr(10)

    def test_no_warmup(self):
        sched = OneCycleSchedule(1e-4, 100, warmup_frac=0.0)
        assert sched.lr(0) == pytest.approx(1e-4)


class TestAdamW:
    def test_single_step_direction(self):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        opt = AdamW({"p": p}, weight_decay=0.0)
        p.grad = np.array([1.0, -1.0])
        before = p.data.copy()
        opt.step(lr=0.1)
        # Adam's first step moves by ~lr against the gradient sign
        np.testing.assert_allclose(p.data, before - 0.1 * np.sign(p.grad), atol=1e-6)

    def test_decoupled_weight_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = AdamW({"p": p}, weight_decay=0.5)
        p.grad = np.array([0.0])
        opt.step(lr=0.1)
        # zero gradient: only the decay term acts
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_params_without_grad_untouched(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([5.0]), requires_grad=True)
        opt = AdamW({"a": a, "b": b}, weight_decay=0.1)
        a.grad = np.array([1.0])
        opt.step(lr=0.01)
        assert b.data[0] == 5.0  # no grad, no decay, no moment update
        assert opt.seen["b"] == 0

    def test_converges_on_quadratic(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=4)
        p = Tensor(np.zeros(4), requires_grad=True)
        opt = AdamW({"p": p}, weight_decay=0.0)
        for _ in range(400):
            p.zero_grad()
            loss = T.tsum(T.mul(T.sub(p, Tensor(target)), T.sub(p, Tensor(target))))
            loss.backward()
            opt.step(lr=0.05)
        np.testing.assert_allclose(p.data, target, atol=1e-3)

    def test_state_roundtrip(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = AdamW({"p": p})
        p.grad = np.array([0.3, -0.2])
        opt.step(lr=0.01)
        state = opt.state_arrays()

        q = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt2 = AdamW({"p": q})
        opt2.load_state_arrays(state)
        assert opt2.seen["p"] == 1
        np.testing.assert_array_equal(opt2.exp_avg["p"], opt.exp_avg["p"])
        np.testing.assert_array_equal(opt2.exp_avg_sq["p"], opt.exp_avg_sq["p"])
