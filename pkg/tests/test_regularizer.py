import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emrlab.exceptions import DivergenceError
from emrlab import regularizer as reg


def quad_loss_grad(theta, theta_star, alpha, lam, task_grad):
    """Gradient of the regularized loss by central differences of the penalty."""
    h = 1e-6

    def penalty(t):
        return 0.5 * lam * np.sum(alpha * (t - theta_star) ** 2)

    fd = np.zeros_like(theta)
    for k in range(theta.shape[0]):
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        fd[k] = (penalty(up) - penalty(down)) / (2 * h)
    return task_grad + fd


def test_quad_step_matches_explicit_gradient_step():
    theta, star, alpha, g = (np.array([v]) for v in (1.0, 0.0, 1.0, 0.0))
    out = reg.quad_reg_step(theta, star, alpha, g, 0.1, 1.0)
    assert out[0] == pytest.approx(0.9, abs=1e-15)
    oracle = theta - 0.1 * quad_loss_grad(theta, star, alpha, 1.0, g)
    assert out[0] == pytest.approx(oracle[0], abs=1e-9)


def test_quad_step_random_against_gradient_oracle():
    rng = np.random.default_rng(0)
    theta, star, g = rng.normal(size=(3, 8))
    alpha = rng.uniform(0, 2, 8)
    out = reg.quad_reg_step(theta, star, alpha, g, 0.05, 3.0)
    oracle = theta - 0.05 * quad_loss_grad(theta, star, alpha, 3.0, g)
    np.testing.assert_allclose(out, oracle, rtol=0, atol=1e-8)


def test_quad_step_lambda_zero_is_sgd():
    theta, g = np.array([0.3, -2.0]), np.array([1.0, 4.0])
    out = reg.quad_reg_step(theta, [9.0, 9.0], [5.0, 5.0], g, 0.1, 0.0)
    np.testing.assert_array_equal(out, theta - 0.1 * g)


def test_quad_step_errors():
    with pytest.raises(ValueError):
        reg.quad_reg_step([1.0, 2.0], [0.0], [1.0], [0.0], 0.1, 1.0)
    with pytest.raises(DivergenceError):
        reg.quad_reg_step([1e308], [-1e308], [1.0], [0.0], 1.0, 10.0)


def test_quad_unrolled_two_steps_by_hand():
    eta, lam, a = 0.1, 2.0, 1.5
    g0, g1 = 0.4, -0.7
    c = 1 - eta * lam * a
    expected = 1.0 - (c * eta * g0 + eta * g1)
    out = reg.quad_unrolled([1.0], [[g0], [g1]], [a], eta, lam)
    assert out[0] == pytest.approx(expected, abs=1e-15)
    np.testing.assert_array_equal(reg.quad_unrolled([2.0], [], [1.0], eta, lam), [2.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 25), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_quad_unrolled_equals_iteration(steps, dim, seed):
    rng = np.random.default_rng(seed)
    star = rng.normal(size=dim)
    alpha = rng.uniform(0, 1, dim)
    eta, lam = rng.uniform(0.01, 0.5), rng.uniform(0, 1.5)
    grads = rng.normal(size=(steps, dim))
    theta = star.copy()
    for g in grads:
        theta = reg.quad_reg_step(theta, star, alpha, g, eta, lam)
    closed = reg.quad_unrolled(star, list(grads), alpha, eta, lam)
    scale = max(np.abs(theta - star).max(), 1e-300)
    assert np.abs(closed - theta).max() / scale < 1e-10


def test_lambda_upper():
    assert reg.lambda_upper(0.1, [0.5, 1.0, -0.2]) == pytest.approx(10.0)
    assert reg.lambda_upper(0.1, [-4.0, 1.0]) == pytest.approx(2.5)
    assert reg.lambda_upper(0.1, [0.0, 0.0]) == math.inf
    with pytest.raises(ValueError):
        reg.lambda_upper(0.0, [1.0])


def test_count_violations():
    count, frac = reg.count_violations(0.1, 10.0, [0.5, 2.0, 1.0, -3.0])
    assert count == 2 and frac == 0.5
    assert reg.count_violations(0.1, 0.0, [1e9])[0] == 0
    lam = reg.lambda_upper(0.1, [0.5, 2.0])
    assert reg.count_violations(0.1, lam, [0.5, 2.0])[0] == 0


@pytest.mark.parametrize("count,text", [
    (16, "16 (0.001% parameters)"),
    (5, "5 (0.0004% parameters)"),
    (12, "12 (0.001% parameters)"),
    (31, "31 (0.002% parameters)"),
    (0, "0 (0% parameters)"),
])
def test_format_violations(count, text):
    assert reg.format_violations(count, 1_200_000) == text


def test_averaging_ratio():
    alpha = [1.0, 100.0, -50.0]
    assert reg.averaging_ratio(alpha, 1) == 1.0
    assert reg.averaging_ratio(alpha, 0) == pytest.approx(0.01)
    assert reg.averaging_ratio(alpha, 2) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        reg.averaging_ratio([0.0, 0.0], 0)


def test_relative_importance_examples():
    np.testing.assert_allclose(reg.relative_importance([1.0, 0.0, 4.0, 0.0], [1.0, 9.0, 1.0, 0.0]),
                               [0.5, 0.0, 2 / 3, 0.0], rtol=1e-15)
    assert reg.relative_importance([-4.0], [1.0])[0] == pytest.approx(2 / 3)


# zero or at least 1e-100 so that scaling by c cannot underflow to zero
scores = arrays(np.float64, 8, elements=st.one_of(st.just(0.0), st.floats(1e-100, 1e6)))


@given(scores, scores, st.floats(1e-3, 1e3))
def test_relative_importance_bounded_and_scale_free(prev, task, c):
    R = reg.relative_importance(prev, task)
    assert np.all((R >= 0) & (R <= 1))
    np.testing.assert_allclose(reg.relative_importance(c * prev, c * task), R, rtol=1e-9, atol=1e-12)


def test_emr_step_example():
    out = reg.emr_step([1.0], [0.0], [1.0], 0.1, [0.5])
    assert out[0] == pytest.approx(0.45, abs=1e-15)
    np.testing.assert_array_equal(reg.emr_step([1.0], [0.0], [1.0], 0.1, [0.0]), [0.9])
    np.testing.assert_array_equal(reg.emr_step([1.0], [0.25], [1.0], 0.1, [1.0]), [0.25])
    with pytest.raises(ValueError):
        reg.emr_average([1.0], [0.0], [1.5])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 25), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_emr_unrolled_equals_iteration(steps, dim, seed):
    rng = np.random.default_rng(seed)
    star = rng.normal(size=dim)
    eta = rng.uniform(0.01, 0.5)
    grads = rng.normal(size=(steps, dim))
    Rs = rng.uniform(0, 1, size=(steps, dim))
    theta = star.copy()
    for g, r in zip(grads, Rs):
        theta = reg.emr_step(theta, star, g, eta, r)
    closed = reg.emr_unrolled(star, list(grads), eta, list(Rs))
    scale = max(np.abs(theta - star).max(), 1e-300)
    assert np.abs(closed - theta).max() / scale < 1e-10


def test_emr_and_quadratic_agree_to_first_order():
    # one step from theta*: quadratic moves by -eta*g, EMR by -(1-R)*eta*g; with
    # R = eta*lam*alpha the two-step disagreement shrinks as O(eta^2)
    rng = np.random.default_rng(1)
    star, g0, g1 = rng.normal(size=(3, 5))
    alpha, lam = rng.uniform(0.1, 1, 5), 2.0
    diffs = []
    for eta in (0.02, 0.01):
        R = eta * lam * alpha
        q = reg.quad_unrolled(star, [g0, g1], alpha, eta, lam)
        e = reg.emr_unrolled(star, [g0, g1], eta, [np.zeros(5), R])
        diffs.append(np.abs(q - e).max())
    assert diffs[0] / diffs[1] == pytest.approx(4.0, rel=0.05)


def test_proximal_coefficients():
    out = reg.proximal_coefficients([0.0, 0.5, 2 / 3, 1.0])
    np.testing.assert_allclose(out[:3], [0.0, 1.0, 2.0], rtol=1e-14)
    assert out[3] == math.inf


def test_proximal_minimizer_is_emr_average():
    theta_hat, star, R = 0.8, -0.4, 0.3
    c = reg.proximal_coefficients([R])[0]
    x = np.linspace(-1, 1, 200001)
    obj = 0.5 * (x - theta_hat) ** 2 + 0.5 * c * (x - star) ** 2
    assert x[np.argmin(obj)] == pytest.approx(reg.emr_average([theta_hat], [star], [R])[0], abs=1e-5)


@pytest.mark.parametrize("p,alternates,diverges", [
    (0.5, False, False), (1.0, False, False), (1.5, True, False),
    (2.0, True, False), (2.5, True, True), (-0.5, False, True),
])
def test_stability_phase(p, alternates, diverges):
    assert reg.stability_phase(p) == {"alternates": alternates, "diverges": diverges}


def test_homogeneous_gaps_follow_closed_form():
    gaps = reg.homogeneous_gaps([1.0], [0.0], [1.0], 0.5, 5.0, 6)[:, 0]  # p = 2.5
    np.testing.assert_allclose(gaps, (-1.5) ** np.arange(7), rtol=1e-14)
    gaps = reg.homogeneous_gaps([1.0], [0.0], [1.0], 0.5, 1.0, 6)[:, 0]  # p = 0.5
    assert np.all(np.diff(gaps) < 0) and np.all(gaps > 0)


def test_stability_report_keys():
    rep = reg.stability_report(0.1, 10.0, [2.0, 0.5])
    assert rep == {"lambda": 10.0, "eta": 0.1, "violations": 1, "fraction": 0.5,
                   "stable": True, "first_nonfinite_step": None}
    assert reg.stability_report(0.1, 10.0, [2.0], first_nonfinite_step=7)["stable"] is False


def test_reg_config_validation():
    reg.RegConfig(0.1, 0.0, "emr")
    for kwargs in ({"eta": 0.0}, {"eta": 0.1, "lam": -1.0}, {"eta": 0.1, "mode": "l2"}):
        with pytest.raises(ValueError):
            reg.RegConfig(**kwargs)
