import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nasunet.autodiff import Parameter
from nasunet.optim import SGD, Adam, adam_step, cosine_lr, sgd_momentum_step


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 300, 0.025, 0.01) == 0.025
    assert cosine_lr(300, 300, 0.025, 0.01) == pytest.approx(0.01, abs=1e-15)
    assert cosine_lr(150, 300, 0.025, 0.01) == pytest.approx(0.0175, abs=1e-15)


def test_cosine_errors():
    with pytest.raises(ValueError):
        cosine_lr(-1, 10, 0.1, 0.01)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.1, 0.01)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1, 0.01)


@given(T=st.integers(1, 500))
def test_cosine_monotone(T):
    lrs = [cosine_lr(t, T, 0.025, 0.01) for t in range(T + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(0.01 - 1e-15 <= v <= 0.025 for v in lrs)


def test_sgd_hand_steps():
    p, v = np.array([1.0]), np.array([0.0])
    sgd_momentum_step([p], [np.array([1.0])], [v], lr=0.1, weight_decay=0.0)
    np.testing.assert_allclose((p[0], v[0]), (0.9, 1.0))
    p, v = np.array([1.0]), np.array([0.0])
    sgd_momentum_step([p], [np.array([1.0])], [v], lr=0.1, weight_decay=0.1)
    np.testing.assert_allclose((p[0], v[0]), (0.89, 1.1))


def test_sgd_zero_grad_decays_velocity():
    p, v = np.array([2.0, -1.0]), np.array([1.0, 4.0])
    for k in range(1, 4):
        sgd_momentum_step([p], [np.zeros(2)], [v], lr=0.0)
        np.testing.assert_allclose(v, np.array([1.0, 4.0]) * 0.95**k)
    np.testing.assert_array_equal(p, [2.0, -1.0])


def test_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_momentum_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1)
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(2)], {"m": [np.zeros(3)], "v": [np.zeros(2)], "t": 0}, 0.1)


def test_adam_first_step_is_lr():
    p = np.array([0.0])
    st_ = {"m": [np.zeros(1)], "v": [np.zeros(1)], "t": 0}
    adam_step([p], [np.array([1.0])], st_, lr=0.1)
    assert p[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_zero_grad_and_huge_grad():
    p = np.array([3.0])
    st_ = {"m": [np.zeros(1)], "v": [np.zeros(1)], "t": 0}
    adam_step([p], [np.zeros(1)], st_, lr=0.1)
    assert p[0] == 3.0
    adam_step([p], [np.array([1e6])], st_, lr=0.1)
    assert np.isfinite(st_["m"][0]).all() and np.isfinite(st_["v"][0]).all() and np.isfinite(p).all()


def test_adam_closed_form_constant_grad():
    # constant gradient g: m_hat = g, v_hat = g^2 every step -> each step moves lr*g/(|g|+eps)
    p = np.array([0.0])
    st_ = {"m": [np.zeros(1)], "v": [np.zeros(1)], "t": 0}
    for _ in range(5):
        adam_step([p], [np.array([0.5])], st_, lr=0.01, betas=(0.5, 0.999))
    assert p[0] == pytest.approx(-0.05, rel=1e-6)


def test_optimizers_skip_params_without_grad():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    a.grad = np.ones(2, dtype=a.data.dtype)
    for opt in (SGD([a, b], lr=0.1, weight_decay=0.5), Adam([a, b], lr=0.1, weight_decay=0.5)):
        before = b.data.copy()
        opt.step()
        np.testing.assert_array_equal(b.data, before)
    assert (a.data < 1).all()


def test_adam_class_matches_functional():
    rng = np.random.default_rng(0)
    p = Parameter(rng.standard_normal(4))
    ref = p.data.astype(np.float64).copy()
    st_ = {"m": [np.zeros(4)], "v": [np.zeros(4)], "t": 0}
    opt = Adam([p], lr=0.01, betas=(0.5, 0.999), weight_decay=1e-3)
    for _ in range(3):
        g = rng.standard_normal(4)
        p.grad = g.astype(p.data.dtype)
        opt.step()
        adam_step([ref], [p.grad.astype(np.float64)], st_, 0.01, (0.5, 0.999), weight_decay=1e-3)
    np.testing.assert_allclose(p.data, ref, rtol=1e-5, atol=1e-6)
    assert math.isclose(int(opt.t[0]), 3)
