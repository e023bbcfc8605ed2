"""Optimizer and schedule tests against closed-form single-step values."""
import math

import numpy as np
import numpy.testing as npt
import pytest

from cotrain.errors import ConfigError
from cotrain.optim import AdamW, adamw_update, lr_schedule
from cotrain.tensor import Tensor


class TestAdamWUpdate:
    def test_single_step_hand_value(self):
        # First step with m=v=0: m_hat = grad, v_hat = grad^2, so the Adam
        # term is lr * sign(grad) up to eps; decay shrinks the weight first.
        param = np.array([2.0])
        grad = np.array([0.5])
        m = np.zeros(1)
        v = np.zeros(1)
        lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
        adamw_update(param, grad, m, v, t=1, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
        decayed = 2.0 - lr * wd * 2.0
        want = decayed - lr * 0.5 / (math.sqrt(0.25) + eps)
        npt.assert_allclose(param, [want], atol=1e-12)
        npt.assert_allclose(m, [(1 - b1) * 0.5], atol=1e-15)
        npt.assert_allclose(v, [(1 - b2) * 0.25], atol=1e-15)

    def test_two_steps_track_moments(self):
        param = np.array([1.0])
        m = np.zeros(1)
        v = np.zeros(1)
        g1, g2 = 0.3, -0.2
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        adamw_update(param, np.array([g1]), m, v, 1, lr, b1, b2, eps, 0.0)
        adamw_update(param, np.array([g2]), m, v, 2, lr, b1, b2, eps, 0.0)
        m_want = b1 * (1 - b1) * g1 + (1 - b1) * g2
        v_want = b2 * (1 - b2) * g1**2 + (1 - b2) * g2**2
        npt.assert_allclose(m, [m_want], atol=1e-15)
        npt.assert_allclose(v, [v_want], atol=1e-15)

    def test_zero_decay_leaves_magnitude_to_adam_only(self):
        a = np.array([5.0])
        b = np.array([5.0])
        g = np.array([0.1])
        adamw_update(a, g, np.zeros(1), np.zeros(1), 1, 0.1, 0.9, 0.999, 1e-8, 0.0)
        adamw_update(b, g, np.zeros(1), np.zeros(1), 1, 0.1, 0.9, 0.999, 1e-8, 0.05)
        npt.assert_allclose(a[0] - b[0], 0.1 * 0.05 * 5.0, atol=1e-12)


def make_param(values, requires_grad=True):
    t = Tensor(np.asarray(values, dtype=np.float32), requires_grad=requires_grad)
    return t


class TestAdamW:
    def test_decay_skips_vectors(self):
        mat = make_param([[1.0, 1.0], [1.0, 1.0]])
        vec = make_param([1.0, 1.0])
        opt = AdamW({"w": mat, "b": vec}, weight_decay=0.5)
        mat.grad = np.zeros((2, 2), dtype=np.float32)
        vec.grad = np.zeros(2, dtype=np.float32)
        opt.step(lr=0.1)
        npt.assert_allclose(mat.data, 0.95 * np.ones((2, 2)), atol=1e-6)
        npt.assert_allclose(vec.data, np.ones(2), atol=1e-7)

    def test_params_without_grad_are_untouched(self):
        p = make_param([3.0, 3.0])
        opt = AdamW({"p": p})
        opt.step(lr=0.1)
        npt.assert_array_equal(p.data, [3.0, 3.0])
        assert opt.t == 1

    def test_zero_grad_clears(self):
        p = make_param([1.0])
        p.grad = np.ones(1, dtype=np.float32)
        opt = AdamW({"p": p})
        opt.zero_grad()
        assert p.grad is None

    def test_state_roundtrip_is_bitwise(self):
        p = make_param([[1.0, 2.0]])
        opt = AdamW({"p": p}, weight_decay=0.1)
        for step in range(3):
            p.grad = np.full((1, 2), 0.1 * (step + 1), dtype=np.float32)
            opt.step(lr=0.05)
        stash = opt.state_arrays()
        assert set(stash) == {"opt.m.p", "opt.v.p"}

        fresh = AdamW({"p": make_param([[0.0, 0.0]])}, weight_decay=0.1)
        fresh.load_state_arrays(stash, t=3)
        assert fresh.t == 3
        npt.assert_array_equal(fresh.m["p"], opt.m["p"])
        npt.assert_array_equal(fresh.v["p"], opt.v["p"])
        assert fresh.m["p"].dtype == np.float32

    def test_moments_keep_parameter_dtype(self):
        p = make_param([[1.0]])
        opt = AdamW({"p": p})
        assert opt.m["p"].dtype == np.float32
        assert opt.v["p"].dtype == np.float32


class TestLrSchedule:
    def test_warmup_is_linear(self):
        assert lr_schedule(0, 100, 1.0, 10) == 0.0
        npt.assert_allclose(lr_schedule(5, 100, 1.0, 10), 0.5, atol=1e-12)
        npt.assert_allclose(lr_schedule(10, 100, 1.0, 10), 1.0, atol=1e-12)

    def test_cosine_endpoint_hits_lr_min(self):
        assert abs(lr_schedule(100, 100, 3e-4, 10, lr_min=1e-5) - 1e-5) < 1e-12
        assert abs(lr_schedule(2000, 2000, 1.0, 0) - 0.0) < 1e-12

    def test_cosine_midpoint(self):
        # Halfway through decay the cosine sits at the arithmetic mean.
        lr = lr_schedule(55, 100, 1.0, 10, lr_min=0.2)
        npt.assert_allclose(lr, 0.6, atol=1e-12)

    def test_monotone_decay_after_warmup(self):
        values = [lr_schedule(s, 200, 1.0, 20) for s in range(20, 201)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_warmup_with_floor(self):
        npt.assert_allclose(lr_schedule(0, 100, 1.0, 10, lr_min=0.1), 0.1, atol=1e-12)

    def test_validation(self):
        with pytest.raises(ConfigError):
            lr_schedule(0, 0, 1.0, 0)
        with pytest.raises(ConfigError):
            lr_schedule(0, 100, 1.0, 100)
        with pytest.raises(ConfigError):
            lr_schedule(0, 100, 1.0, -1)
