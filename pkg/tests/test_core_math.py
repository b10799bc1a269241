import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from halfspace.core_math import (Adam, AdamState, adam_step, finite_diff_grad, he_gaussian_init,
                                 make_rng, max_relative_error, uniform_fanin_init, zero_init)


def test_rng_same_seed_same_stream():
    a = make_rng(5, 1).normal(size=10)
    b = make_rng(5, 1).normal(size=10)
    c = make_rng(5, 2).normal(size=10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_he_init_single_entry_is_deterministic():
    x = he_gaussian_init(1, 1, make_rng(0))
    y = he_gaussian_init(1, 1, make_rng(0))
    assert x.shape == (1, 1) and x[0, 0] == y[0, 0]


def test_he_init_variance():
    W = he_gaussian_init(1000, 4, make_rng(7))
    assert abs(W.var() - 0.5) < 0.15 * 0.5


def test_he_init_shape_and_finite():
    W = he_gaussian_init(2, 3, make_rng(1))
    assert W.shape == (2, 3) and np.all(np.isfinite(W))
    with pytest.raises(ValueError):
        he_gaussian_init(0, 3, make_rng(1))


def test_uniform_init_bounds():
    W = uniform_fanin_init(200, 16, make_rng(3))
    assert np.all(np.abs(W) <= 0.25)
    assert W.max() > 0.2 and W.min() < -0.2


def test_zero_init():
    assert np.array_equal(zero_init(3), np.zeros(3))


def test_adam_first_step():
    p = np.zeros(1)
    adam_step(p, np.ones(1), AdamState.fresh(p, lr=1e-3))
    assert abs(p[0] + 1e-3) < 1e-9


def test_adam_two_steps():
    p = np.zeros(1)
    s = AdamState.fresh(p, lr=1e-3)
    adam_step(p, np.ones(1), s)
    adam_step(p, np.ones(1), s)
    assert abs(p[0] + 2e-3) < 1e-6
    assert s.step_count == 2


def test_adam_zero_grad_leaves_param():
    p = np.array([1.5, -2.0])
    s = AdamState.fresh(p)
    for _ in range(5):
        adam_step(p, np.zeros(2), s)
    assert np.array_equal(p, [1.5, -2.0])
    assert np.all(s.second_moment >= 0)


def test_adam_shape_mismatch():
    p = np.zeros(2)
    with pytest.raises(ValueError):
        adam_step(p, np.zeros(3), AdamState.fresh(p))


def test_adam_skips_none():
    a, b = np.zeros(2), np.zeros(2)
    opt = Adam([a, b], lr=0.1)
    opt.step([np.ones(2), None])
    assert np.all(a < 0) and np.array_equal(b, np.zeros(2))


def test_finite_diff_quadratic():
    theta = np.array([3.0])
    g = finite_diff_grad(lambda: float(theta[0] ** 2), [theta])
    assert abs(g[0][0] - 6.0) < 1e-6
    assert theta[0] == 3.0


def test_finite_diff_constant():
    theta = np.arange(4.0)
    assert np.array_equal(finite_diff_grad(lambda: 2.5, [theta])[0], np.zeros(4))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_finite_diff_half_norm(vals):
    theta = np.array(vals)
    g = finite_diff_grad(lambda: 0.5 * float(theta @ theta), [theta])[0]
    assert np.all(np.abs(g - theta) <= 1e-8)


def test_max_relative_error():
    assert max_relative_error([np.array([1.0, 0.0])], [np.array([1.0, 0.0])]) == 0.0
    assert max_relative_error([np.array([2.0])], [np.array([1.0])]) == pytest.approx(0.5)
