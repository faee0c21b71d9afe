from __future__ import annotations

import math

import numpy as np
import pytest

from s2embed.nn import AdamW, CosineSchedule, Tensor, clip_global_norm


class TestCosineSchedule:
    def test_endpoints(self):
        sched = CosineSchedule(initial_lr=5e-4, alpha=0.1, total_steps=1000)
        assert sched(0) == pytest.approx(5e-4)
        assert sched(1000) == pytest.approx(5e-5)

    def test_midpoint_closed_form(self):
        sched = CosineSchedule(initial_lr=5e-4, alpha=0.1, total_steps=1000)
        # initial * (alpha + (1-alpha) * 0.5 * (1 + cos(pi/2)))
        want = 5e-4 * (0.1 + 0.9 * 0.5)
        assert sched(500) == pytest.approx(want)
        assert want == pytest.approx(2.75e-4)

    def test_clamps_past_total(self):
        sched = CosineSchedule(initial_lr=1e-3, alpha=0.2, total_steps=10)
        assert sched(25) == pytest.approx(2e-4)

    def test_monotone_non_increasing(self):
        sched = CosineSchedule(initial_lr=1e-3, alpha=0.1, total_steps=200)
        values = [sched(s) for s in range(201)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_invalid(self):
        with pytest.raises(ValueError):
            CosineSchedule(1e-3, 0.1, 0)
        with pytest.raises(ValueError):
            CosineSchedule(1e-3, 1.5, 10)


class TestClipGlobalNorm:
    def test_below_threshold_unchanged(self):
        grads = [np.array([0.3, 0.4])]
        out, norm = clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(out[0], grads[0])

    def test_three_four_scales_to_unit(self):
        out, norm = clip_global_norm([np.array([3.0, 4.0])], 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(out[0], [0.6, 0.8])

    def test_post_clip_norm(self):
        rng = np.random.default_rng(0)
        grads = [rng.standard_normal((4, 5)) * 3.0, rng.standard_normal(7) * 3.0]
        out, norm = clip_global_norm(grads, 1.0)
        post = math.sqrt(sum(float((g ** 2).sum()) for g in out))
        assert post == pytest.approx(min(norm, 1.0), abs=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            clip_global_norm([np.array([1.0, np.inf])], 1.0)


class TestAdamW:
    def test_zero_grad_pure_decay(self):
        w = Tensor(np.full(3, 2.0), requires_grad=True)
        opt = AdamW({"w": w}, weight_decay=0.01)
        opt.step(lr=0.5, grads={"w": np.zeros(3)})
        np.testing.assert_allclose(w.data, 2.0 * (1.0 - 0.5 * 0.01))

    def test_scalar_step_hand_evaluated(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW({"w": w}, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.001)
        opt.step(lr=0.1, grads={"w": np.array([1.0])})
        m = 0.1 * 1.0
        v = 0.001 * 1.0
        mhat = m / (1 - 0.9)
        vhat = v / (1 - 0.999)
        want = 1.0 - 0.1 * (mhat / (math.sqrt(vhat) + 1e-8) + 0.001 * 1.0)
        np.testing.assert_allclose(w.data, [want], rtol=1e-15)

    def test_replay_from_serialized_state(self):
        rng = np.random.default_rng(1)
        grads = [
            {"w": rng.standard_normal((3, 2))} for _ in range(4)
        ]
        w_full = Tensor(np.ones((3, 2)), requires_grad=True)
        opt_full = AdamW({"w": w_full})
        for g in grads:
            opt_full.step(0.01, g)

        w_half = Tensor(np.ones((3, 2)), requires_grad=True)
        opt_half = AdamW({"w": w_half})
        for g in grads[:2]:
            opt_half.step(0.01, g)
        state = opt_half.state_arrays()
        snapshot = w_half.data.copy()

        w_resume = Tensor(snapshot, requires_grad=True)
        opt_resume = AdamW({"w": w_resume})
        opt_resume.load_state_arrays(state)
        for g in grads[2:]:
            opt_resume.step(0.01, g)
        np.testing.assert_array_equal(w_resume.data, w_full.data)

    def test_uses_tensor_grad_by_default(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        (w * w).sum().backward()
        opt = AdamW({"w": w}, weight_decay=0.0)
        opt.step(lr=0.1)
        assert w.data[0] < 2.0

    def test_missing_grad_rejected(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        opt = AdamW({"w": w})
        with pytest.raises(ValueError):
            opt.step(lr=0.1)

    def test_non_finite_grad_rejected(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        opt = AdamW({"w": w})
        with pytest.raises(FloatingPointError):
            opt.step(lr=0.1, grads={"w": np.array([np.nan])})

    def test_shape_mismatch_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        opt = AdamW({"w": w})
        with pytest.raises(ValueError):
            opt.step(lr=0.1, grads={"w": np.ones(4)})
