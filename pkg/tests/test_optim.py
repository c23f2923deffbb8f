"""Optimizer, schedule and init: closed-form single-step identities plus the
published recipe values."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from telecast.optim import (Adam, AdamState, GradientNanError, SchedulerConfig,
                            adam_step, lr_at, truncated_normal)
from telecast.rng import RngStream
from telecast.tensor import Tensor


def fresh_state(param):
    return AdamState(m=np.zeros_like(param.data), v=np.zeros_like(param.data))


class TestAdam:
    def test_first_step_equals_lr_for_unit_gradient(self):
        # bias correction makes the first update lr * g / (|g| + eps)
        p = Tensor(np.array([1.0]))
        adam_step(fresh_state(p), p, np.array([1.0]), lr=1e-3)
        assert p.data[0] == pytest.approx(1.0 - 1e-3, rel=1e-6)

    def test_zero_grad_zero_decay_is_identity(self):
        p = Tensor(np.array([0.7, -0.3]))
        adam_step(fresh_state(p), p, np.zeros(2), lr=1e-2, weight_decay=0.0)
        assert p.data.tolist() == [0.7, -0.3]

    def test_decoupled_decay_scales_param(self):
        # recipe values: lr 2e-5, weight decay 3e-6; zero gradient leaves
        # only the multiplicative decay factor
        p = Tensor(np.array([1.0]))
        adam_step(fresh_state(p), p, np.zeros(1), lr=2e-5, weight_decay=3e-6)
        assert p.data[0] == 1.0 * (1.0 - 2e-5 * 3e-6)

    def test_nan_gradient_aborts(self):
        p = Tensor(np.array([1.0]))
        with pytest.raises(GradientNanError, match="NaN"):
            adam_step(fresh_state(p), p, np.array([np.nan]), lr=1e-3)

    def test_named_nan_diagnostic(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([("layer.weight", p)], lr=1e-3)
        p.grad = np.array([np.nan])
        with pytest.raises(GradientNanError, match="layer.weight"):
            opt.step()

    def test_bitwise_determinism(self):
        def run():
            p = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)
            opt = Adam([("w", p)], lr=3e-4, weight_decay=1e-4)
            rng = RngStream(9)
            for _ in range(50):
                p.grad = rng.normal((3,))
                opt.step()
            return p.data.copy()

        assert np.array_equal(run(), run())

    def test_step_counts_increment_once_per_update(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam([("w", p)], lr=1e-3)
        for expected in (1, 2, 3):
            p.grad = np.ones(2)
            opt.step()
            assert opt.slots["w"].step == expected

    def test_lr_scales_apply_by_prefix(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([("gate.w", a), ("body.w", b)], lr=1e-3, lr_scales={"gate.": 10.0})
        a.grad = np.array([1.0])
        b.grad = np.array([1.0])
        opt.step()
        assert (1.0 - a.data[0]) == pytest.approx(10 * (1.0 - b.data[0]), rel=1e-9)


class TestScheduler:
    def test_recipe_values(self):
        cfg = SchedulerConfig()
        assert lr_at(0, cfg) == 2e-5
        assert lr_at(14, cfg) == 2e-5
        assert lr_at(15, cfg) == 1e-5
        assert lr_at(29, cfg) == 1e-5

    def test_epoch_out_of_range(self):
        cfg = SchedulerConfig()
        with pytest.raises(ValueError):
            lr_at(30, cfg)
        with pytest.raises(ValueError):
            lr_at(-1, cfg)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SchedulerConfig(gamma=0.0)
        with pytest.raises(ValueError):
            SchedulerConfig(milestone_period=0)

    @given(st.integers(1, 10), st.integers(2, 40))
    def test_non_increasing(self, period, total):
        cfg = SchedulerConfig(base_lr=1e-3, gamma=0.5, milestone_period=period,
                              total_epochs=total)
        values = [lr_at(e, cfg) for e in range(total)]
        assert values[0] == 1e-3
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestTruncatedNormal:
    def test_all_samples_inside_bounds(self):
        draws = truncated_normal((100000,), RngStream(1), std=0.02)
        assert np.abs(draws).max() <= 0.04

    def test_sample_mean_near_zero(self):
        draws = truncated_normal((100000,), RngStream(2), std=0.02)
        assert abs(draws.mean()) < 1e-3

    def test_deterministic_given_seed(self):
        a = truncated_normal((50, 3), RngStream(7), std=0.5)
        b = truncated_normal((50, 3), RngStream(7), std=0.5)
        assert np.array_equal(a, b)

    def test_rejects_bad_std(self):
        with pytest.raises(ValueError):
            truncated_normal((2,), RngStream(0), std=0.0)
