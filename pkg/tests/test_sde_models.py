import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitrisk.sde_models import (FeedbackPolicy, SafeSet, SingularPointError, brownian_1d, circle_obstacle,
                                 constraint_from_dict, double_integrator_1d, dubins_system, halfplane_constraint,
                                 integrate_noiseless)


def fd_gradient(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


def fd_hessian(grad, x, eps=1e-5):
    H = np.zeros((x.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        H[:, i] = (grad(x + e) - grad(x - e)) / (2 * eps)
    return H


def test_dubins_drift_thrust_along_heading():
    sys = dubins_system()
    x = np.zeros(6)
    np.testing.assert_allclose(sys.drift(0, x, np.array([1.0, 0.0])), [0, 0, 1, 0, 0, 0], atol=1e-15)
    x[4] = np.pi / 2
    np.testing.assert_allclose(sys.drift(0, x, np.array([1.0, 0.0]))[2:4], [0, 1], atol=1e-15)


def test_dubins_diffusion_structure():
    sys = dubins_system(noise_scale=0.05)
    G = sys.G(0, np.zeros(6), np.zeros(2))
    assert G.shape == (6, 4)
    np.testing.assert_array_equal(G[:2], 0.0)
    np.testing.assert_allclose(G[2:4, :2], 0.05 * np.eye(2))
    assert sys.is_locally_deterministic()
    with pytest.raises(ValueError):
        dubins_system(noise_scale=0.0)


def test_dubins_linearization_has_velocity_block():
    sys = dubins_system()
    A, B = sys.linearize(0.0, np.zeros(6), np.zeros(2))
    np.testing.assert_allclose(A[:2, 2:4], np.eye(2))
    np.testing.assert_allclose(A[4, 5], 1.0)


@given(st.floats(-10, 10), st.floats(-5, 5))
def test_dubins_thrust_norm_preserved(theta, c):
    sys = dubins_system()
    x = np.zeros(6)
    x[4] = theta
    acc = sys.drift(0, x, np.array([c, 0.0]))[2:4]
    assert np.linalg.norm(acc) == pytest.approx(abs(c), rel=1e-12, abs=1e-15)


def test_double_integrator():
    sys = double_integrator_1d(noise=0.3)
    np.testing.assert_allclose(sys.drift(0, np.array([0.0, 2.0]), np.zeros(1)), [2.0, 0.0])
    G = sys.G(0, np.zeros(2), np.zeros(1))
    assert G[0, 0] == 0.0 and G[1, 0] == 0.3
    assert sys.is_locally_deterministic()


def test_brownian_is_not_locally_deterministic():
    assert not brownian_1d(0.0, 1.0).is_locally_deterministic()


def test_integrate_noiseless_constant_acceleration():
    sys = double_integrator_1d()
    x = integrate_noiseless(sys, 0.0, np.array([0.0, 1.0]), np.array([2.0]), 0.5)
    np.testing.assert_allclose(x, [0.5 + 0.25, 2.0], rtol=1e-12)


def test_circle_values():
    c = circle_obstacle((0, 0), 1.0)
    assert c.g(np.array([2.0, 0, 0, 0, 0, 0])) == pytest.approx(-1.0)
    assert c.g(np.array([0.0, 1.0, 0, 0, 0, 0])) == pytest.approx(0.0, abs=1e-15)
    x = np.array([2.0, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(c.gradient(x), fd_gradient(c.g, x), atol=1e-8)
    assert c.gradient(x)[0] < 0
    with pytest.raises(SingularPointError):
        c.gradient(np.zeros(6))


def test_halfplane_values():
    c = halfplane_constraint((1, 0), 5.0)
    assert c.g(np.array([4.0, 0, 0, 0, 0, 0])) == pytest.approx(-1.0)
    assert c.g(np.array([5.0, 0, 0, 0, 0, 0])) == 0.0
    np.testing.assert_array_equal(c.hessian(np.random.default_rng(0).normal(size=6)), 0.0)
    assert c.linear


def test_constraint_dict_round_trip():
    for c in (circle_obstacle((1.0, 2.0), 0.5), halfplane_constraint((0.0, 1.0), 0.3)):
        d = c.to_dict()
        c2 = constraint_from_dict(d)
        x = np.array([0.3, -0.2, 0, 0, 0, 0])
        assert c2.g(x) == c.g(x)
    with pytest.raises(ValueError):
        constraint_from_dict({"type": "rectangle"})


def test_gradients_and_hessians_match_finite_differences():
    rng = np.random.default_rng(1)
    constraints = [circle_obstacle((0.5, -0.3), 0.7), halfplane_constraint((0.6, -0.8), 0.2)]
    for c in constraints:
        for _ in range(100):
            x = rng.normal(size=6) * 2
            if np.linalg.norm(x[:2] - (0.5, -0.3)) < 0.1:
                continue
            g = c.gradient(x)
            np.testing.assert_allclose(g, fd_gradient(c.g, x), rtol=1e-5, atol=1e-7)
            np.testing.assert_allclose(c.hessian(x), fd_hessian(c.gradient, x), rtol=1e-4, atol=1e-5)


def test_safe_set_order_independent():
    cs = [circle_obstacle((1, 0), 0.3), halfplane_constraint((0, 1), 1.0), circle_obstacle((-1, 0.5), 0.4)]
    X = np.random.default_rng(2).normal(size=(200, 6))
    ref = SafeSet(tuple(cs)).contains(X)
    for perm in itertools.permutations(cs):
        np.testing.assert_array_equal(SafeSet(perm).contains(X), ref)


def test_policy_horizon_check():
    p = FeedbackPolicy(np.zeros((61, 2)), np.zeros((60, 1)))
    p.check_horizon(60.0, 1.0)
    with pytest.raises(ValueError):
        p.check_horizon(60.0, 2.0)
