"""Core tail-statistics tests: quantiles, superquantiles, smoothing."""

import numpy as np
import pytest

from tailfed import (
    ConformityLevel,
    MixtureWeights,
    SmoothingParam,
    WeightedValues,
    conformity,
    in_feasible_set,
    plus_objective,
    smoothed_device_coefficients,
    smoothed_eta_minimizers,
    smoothed_eta_star,
    smoothed_objective,
    smoothed_objective_slope,
    smoothed_plus,
    smoothed_plus_derivative,
    superquantile,
    weighted_quantile,
)

from oracles import (
    grid_eta_minimum,
    max_reweighted_mean,
    plus_objective_naive,
    quantile_naive,
    smoothed_objective_naive,
    smoothed_slope_naive,
    tail_average_naive,
)


def random_instance(rng, n=None, scale=None):
    n = n or int(rng.integers(1, 9))
    scale = scale or float(rng.uniform(0.5, 20.0))
    values = rng.normal(size=n) * scale
    weights = rng.uniform(0.1, 1.0, size=n)
    return WeightedValues(values, weights / weights.sum())


# ---------------------------------------------------------------------------
# validation types


def test_conformity_level_bounds():
    ConformityLevel(1.0)
    ConformityLevel(0.05)
    for bad in (0.0, -0.2, 1.2, float("nan")):
        with pytest.raises(ValueError):
            ConformityLevel(bad)


def test_smoothing_param_positive():
    SmoothingParam(1e-9)
    for bad in (0.0, -1.0, float("nan")):
        with pytest.raises(ValueError):
            SmoothingParam(bad)


def test_weighted_values_rejects_bad_inputs():
    with pytest.raises(ValueError):
        WeightedValues([1.0, np.inf], [0.5, 0.5])
    with pytest.raises(ValueError):
        WeightedValues([1.0, 2.0], [1.0, -0.1])
    with pytest.raises(ValueError):
        WeightedValues([1.0, 2.0], [0.9, 0.3])  # off by too much to renormalize


def test_weighted_values_renormalizes_small_drift():
    wv = WeightedValues([1.0, 2.0], [0.5 + 2e-10, 0.5])
    assert abs(float(wv.weights.sum()) - 1.0) <= 1e-15


def test_conformity_examples():
    alpha = np.array([1 / 3, 1 / 3, 1 / 3])
    assert conformity(MixtureWeights(alpha), alpha) == pytest.approx(1.0)
    assert conformity(MixtureWeights([1.0, 0.0, 0.0]), alpha) == pytest.approx(1 / 3)
    assert conformity(MixtureWeights([0.5, 0.25, 0.25]), alpha) == pytest.approx(2 / 3)


def test_feasible_set_examples():
    alpha = np.array([1 / 3, 1 / 3, 1 / 3])
    assert in_feasible_set(MixtureWeights(alpha), alpha, 0.7)
    assert in_feasible_set(MixtureWeights([0.5, 0.5, 0.0]), alpha, 2 / 3)
    assert not in_feasible_set(MixtureWeights([0.6, 0.4, 0.0]), alpha, 2 / 3)


def test_feasibility_matches_conformity():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        a = rng.uniform(0.05, 1.0, size=n)
        a /= a.sum()
        p = rng.uniform(0.0, 1.0, size=n)
        p /= p.sum()
        theta = float(rng.uniform(0.05, 1.0))
        pi = MixtureWeights(p)
        feasible = in_feasible_set(pi, a, theta)
        c = conformity(pi, a)
        # skip knife-edge draws where the tolerance collar decides
        if abs(c - theta) > 1e-9:
            assert feasible == (c >= theta)


# ---------------------------------------------------------------------------
# quantile and superquantile


def test_quantile_four_point_example():
    wv = WeightedValues([1.0, 2.0, 3.0, 4.0], [0.25] * 4)
    assert weighted_quantile(wv, 0.5) == 2.0


def test_quantile_single_value():
    assert weighted_quantile(WeightedValues([3.7], [1.0]), 0.9) == 3.7


def test_quantile_skewed_weights():
    wv = WeightedValues([5.0, 1.0], [0.9, 0.1])
    assert weighted_quantile(wv, 0.2) == 5.0


def test_quantile_matches_naive_rule():
    rng = np.random.default_rng(1)
    for _ in range(300):
        wv = random_instance(rng)
        theta = float(rng.uniform(0.05, 1.0))
        assert weighted_quantile(wv, theta) == quantile_naive(
            wv.values, wv.weights, theta
        )


def test_quantile_tied_values_merge():
    # two copies of the boundary value; either index gives the same answer
    wv = WeightedValues([1.0, 2.0, 2.0, 9.0], [0.25] * 4)
    assert weighted_quantile(wv, 0.5) == 2.0


def test_superquantile_four_point_example():
    wv = WeightedValues([1.0, 2.0, 3.0, 4.0], [0.25] * 4)
    assert superquantile(wv, 0.5) == pytest.approx(3.5, abs=1e-12)


def test_superquantile_constant_sample():
    wv = WeightedValues([2.5] * 5, [0.2] * 5)
    for theta in (0.1, 0.5, 1.0):
        assert superquantile(wv, theta) == pytest.approx(2.5, abs=1e-12)


def test_superquantile_theta_one_is_mean():
    rng = np.random.default_rng(2)
    for _ in range(100):
        wv = random_instance(rng)
        mean = float(np.dot(wv.weights, wv.values))
        assert superquantile(wv, 1.0) == pytest.approx(mean, abs=1e-10)


def test_superquantile_matches_tail_average():
    rng = np.random.default_rng(3)
    for _ in range(300):
        wv = random_instance(rng)
        theta = float(rng.uniform(0.05, 1.0))
        want = tail_average_naive(wv.values, wv.weights, theta)
        assert superquantile(wv, theta) == pytest.approx(want, abs=1e-9)


def test_superquantile_duality_small_instances():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(1, 5))
        wv = random_instance(rng, n=n)
        for theta in (0.1, 0.5, 0.8):
            dual = max_reweighted_mean(wv.values, wv.weights, theta)
            assert abs(superquantile(wv, theta) - dual) <= 1e-9


def test_superquantile_nonincreasing_in_theta():
    rng = np.random.default_rng(5)
    for _ in range(100):
        wv = random_instance(rng)
        thetas = np.sort(rng.uniform(0.05, 1.0, size=4))
        vals = [superquantile(wv, float(t)) for t in thetas]
        for lo, hi in zip(vals[1:], vals[:-1]):
            assert lo <= hi + 1e-10


def test_plus_objective_matches_naive():
    rng = np.random.default_rng(6)
    for _ in range(200):
        wv = random_instance(rng)
        theta = float(rng.uniform(0.05, 1.0))
        eta = float(rng.normal() * 10)
        want = plus_objective_naive(wv.values, wv.weights, theta, eta)
        assert plus_objective(wv, theta, eta) == pytest.approx(want, abs=1e-10)


def test_superquantile_is_min_of_plus_objective():
    # evaluating at the quantile must beat any other eta
    rng = np.random.default_rng(7)
    for _ in range(200):
        wv = random_instance(rng)
        theta = float(rng.uniform(0.05, 1.0))
        s = superquantile(wv, theta)
        eta = float(rng.normal() * 10)
        assert s <= plus_objective(wv, theta, eta) + 1e-9


# ---------------------------------------------------------------------------
# hinge smoothing


def test_smoothed_plus_branch_values():
    assert smoothed_plus(-1.0, 0.5) == 0.25
    assert smoothed_plus(2.0, 0.5) == 2.0
    assert smoothed_plus(0.25, 0.5) == pytest.approx(0.3125, abs=1e-15)


def test_smoothed_plus_derivative_branches():
    assert smoothed_plus_derivative(-3.0, 0.5) == 0.0
    assert smoothed_plus_derivative(0.25, 0.5) == pytest.approx(0.5)
    assert smoothed_plus_derivative(4.0, 0.5) == 1.0


def test_smoothed_plus_is_continuously_differentiable():
    # value and slope agree across both breakpoints
    nu = 0.3
    for brk in (0.0, nu):
        lo = smoothed_plus(brk - 1e-9, nu)
        hi = smoothed_plus(brk + 1e-9, nu)
        assert abs(hi - lo) <= 1e-8
        dlo = smoothed_plus_derivative(brk - 1e-9, nu)
        dhi = smoothed_plus_derivative(brk + 1e-9, nu)
        assert abs(dhi - dlo) <= 1e-8


def test_smoothed_plus_lipschitz_and_envelope():
    rng = np.random.default_rng(8)
    for _ in range(500):
        nu = float(rng.uniform(1e-3, 2.0))
        a, b = rng.normal(size=2) * 3
        assert abs(smoothed_plus(a, nu) - smoothed_plus(b, nu)) <= abs(a - b) + 1e-15
        da = smoothed_plus_derivative(a, nu)
        db = smoothed_plus_derivative(b, nu)
        assert abs(da - db) <= abs(a - b) / nu + 1e-12
        gap = smoothed_plus(a, nu) - max(a, 0.0)
        assert -1e-15 <= gap <= nu / 2 + 1e-15


def test_smoothed_plus_derivative_matches_fd():
    rng = np.random.default_rng(9)
    h = 1e-7
    for _ in range(200):
        nu = float(rng.uniform(0.05, 2.0))
        rho = float(rng.normal() * 2)
        fd = (smoothed_plus(rho + h, nu) - smoothed_plus(rho - h, nu)) / (2 * h)
        assert smoothed_plus_derivative(rho, nu) == pytest.approx(fd, abs=1e-6)


def test_smoothed_plus_vectorized_matches_scalar():
    rng = np.random.default_rng(10)
    rho = rng.normal(size=50)
    nu = 0.4
    vec = smoothed_plus(rho, nu)
    der = smoothed_plus_derivative(rho, nu)
    for i, r in enumerate(rho):
        assert vec[i] == smoothed_plus(float(r), nu)
        assert der[i] == smoothed_plus_derivative(float(r), nu)


# ---------------------------------------------------------------------------
# smoothed objective in eta


def test_smoothed_objective_saturated_region():
    wv = WeightedValues([1.0, 2.0], [0.5, 0.5])
    theta, nu, eta = 0.4, 0.2, 50.0
    assert smoothed_objective(wv, theta, nu, eta) == pytest.approx(
        eta + nu / (2 * theta), abs=1e-12
    )


def test_smoothed_objective_small_nu_recovers_tail_value():
    wv = WeightedValues([1.0, 2.0, 3.0, 4.0], [0.25] * 4)
    got = smoothed_objective(wv, 0.5, 1e-6, 2.0)
    assert got == pytest.approx(3.5, abs=1e-6)


def test_smoothed_objective_single_point_middle_branch():
    # eta at distance nu below the value sits on the quadratic/linear seam:
    # eta + g(nu) = eta + nu, which lands back on the value itself
    x, nu = 3.0, 0.25
    wv = WeightedValues([x], [1.0])
    assert smoothed_objective(wv, 1.0, nu, x - nu) == pytest.approx(x, abs=1e-12)


def test_smoothed_objective_matches_naive():
    rng = np.random.default_rng(11)
    for _ in range(300):
        wv = random_instance(rng)
        theta = float(rng.uniform(0.05, 1.0))
        nu = float(rng.uniform(1e-3, 2.0))
        eta = float(rng.normal() * 10)
        want = smoothed_objective_naive(wv.values, wv.weights, theta, nu, eta)
        assert smoothed_objective(wv, theta, nu, eta) == pytest.approx(want, abs=1e-10)
        wslope = smoothed_slope_naive(wv.values, wv.weights, theta, nu, eta)
        assert smoothed_objective_slope(wv, theta, nu, eta) == pytest.approx(
            wslope, abs=1e-10
        )


def test_smoothing_sandwich_random_tuples():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        wv = random_instance(rng)
        theta = float(rng.uniform(0.05, 1.0))
        nu = float(rng.uniform(1e-3, 2.0))
        eta = float(rng.normal() * 10)
        gap = smoothed_objective(wv, theta, nu, eta) - plus_objective(wv, theta, eta)
        assert -1e-12 <= gap <= nu / (2 * theta) + 1e-12


def test_eta_smoothness_bound():
    # second difference of the objective stays under the curvature bound
    rng = np.random.default_rng(13)
    h = 1e-5
    for _ in range(200):
        wv = random_instance(rng)
        theta = float(rng.uniform(0.1, 1.0))
        nu = float(rng.uniform(0.05, 2.0))
        eta = float(rng.normal() * 5)
        f = lambda e: smoothed_objective(wv, theta, nu, e)
        second = (f(eta + h) - 2 * f(eta) + f(eta - h)) / (h * h)
        assert second <= 1.0 / (nu * theta) + 1e-3


# ---------------------------------------------------------------------------
# eta minimizer interval


def test_eta_interval_two_point_flat_stretch():
    # the stated minimizer 0 is the left end of a genuinely flat interval:
    # between 0 and 9 the low value contributes slope 0 and the high value
    # slope 1, cancelling exactly at theta = 1/2
    wv = WeightedValues([0.0, 10.0], [0.5, 0.5])
    lo, hi = smoothed_eta_minimizers(wv, 0.5, 1.0)
    assert lo == pytest.approx(0.0, abs=1e-12)
    assert hi == pytest.approx(9.0, abs=1e-12)
    _, best, flat_lo, flat_hi = grid_eta_minimum(wv.values, wv.weights, 0.5, 1.0, num=120001)
    assert abs(flat_lo - lo) <= 1e-3
    assert abs(flat_hi - hi) <= 1e-3
    assert smoothed_objective(wv, 0.5, 1.0, lo) == pytest.approx(best, abs=1e-8)
    assert smoothed_objective(wv, 0.5, 1.0, hi) == pytest.approx(best, abs=1e-8)


def test_eta_interval_four_point_flat_stretch():
    # closed form gives 2; the full minimizing set runs to 2.9 because the
    # third value only starts bending the slope once eta + nu crosses it
    wv = WeightedValues([1.0, 2.0, 3.0, 4.0], [0.25] * 4)
    lo, hi = smoothed_eta_minimizers(wv, 0.5, 0.1)
    assert lo == pytest.approx(2.0, abs=1e-12)
    assert hi == pytest.approx(2.9, abs=1e-12)
    _, best, flat_lo, flat_hi = grid_eta_minimum(wv.values, wv.weights, 0.5, 0.1, num=120001)
    assert abs(flat_lo - lo) <= 1e-3
    assert abs(flat_hi - hi) <= 1e-3


def test_eta_interval_single_point_closed_form():
    # lone device: slope vanishes where the hinge derivative equals theta
    x, nu, theta = 3.0, 1.0, 0.5
    wv = WeightedValues([x], [1.0])
    lo, hi = smoothed_eta_minimizers(wv, theta, nu)
    assert lo == pytest.approx(x - nu * theta, abs=1e-12)
    assert hi == pytest.approx(x - nu * theta, abs=1e-12)
    assert lo <= x - 0.5 <= hi  # the advertised point sits inside


def test_eta_interval_slope_signs():
    rng = np.random.default_rng(14)
    for _ in range(200):
        wv = random_instance(rng)
        theta = float(rng.uniform(0.05, 0.95))
        nu = float(rng.uniform(0.01, 2.0))
        lo, hi = smoothed_eta_minimizers(wv, theta, nu)
        assert lo <= hi
        span = float(wv.values.max() - wv.values.min()) + nu + 1.0
        delta = 1e-7 * span
        assert smoothed_slope_naive(wv.values, wv.weights, theta, nu, lo - delta) <= 1e-9
        assert smoothed_slope_naive(wv.values, wv.weights, theta, nu, hi + delta) >= -1e-9
        mid = 0.5 * (lo + hi)
        assert abs(smoothed_objective_slope(wv, theta, nu, mid)) <= 1e-7


def test_eta_interval_beats_grid():
    rng = np.random.default_rng(15)
    for _ in range(25):
        wv = random_instance(rng, n=int(rng.integers(1, 6)), scale=3.0)
        theta = float(rng.uniform(0.1, 0.95))
        nu = float(rng.uniform(0.05, 1.0))
        lo, hi = smoothed_eta_minimizers(wv, theta, nu)
        _, best, _, _ = grid_eta_minimum(wv.values, wv.weights, theta, nu, num=40001)
        for eta in (lo, hi, 0.5 * (lo + hi)):
            assert smoothed_objective(wv, theta, nu, eta) <= best + 1e-6


def test_eta_interval_stays_in_bounds():
    rng = np.random.default_rng(16)
    for _ in range(300):
        wv = random_instance(rng)
        theta = float(rng.uniform(0.05, 1.0))
        nu = float(rng.uniform(0.01, 2.0))
        lo, hi = smoothed_eta_minimizers(wv, theta, nu)
        assert lo >= float(wv.values.min()) - nu - 1e-12
        assert hi <= float(wv.values.max()) + 1e-12


def test_eta_star_is_interval_midpoint():
    rng = np.random.default_rng(17)
    for _ in range(100):
        wv = random_instance(rng)
        theta = float(rng.uniform(0.05, 1.0))
        nu = float(rng.uniform(0.01, 2.0))
        lo, hi = smoothed_eta_minimizers(wv, theta, nu)
        assert smoothed_eta_star(wv, theta, nu) == pytest.approx(
            0.5 * (lo + hi), abs=1e-12
        )


def test_eta_interval_theta_one_gives_mean_value():
    # theta = 1 pushes the minimizer below every value; the attained value is
    # exactly the weighted mean
    rng = np.random.default_rng(18)
    for _ in range(100):
        wv = random_instance(rng)
        nu = float(rng.uniform(0.01, 2.0))
        lo, hi = smoothed_eta_minimizers(wv, 1.0, nu)
        assert lo == hi
        mean = float(np.dot(wv.weights, wv.values))
        assert smoothed_objective(wv, 1.0, nu, lo) == pytest.approx(mean, abs=1e-10)


# ---------------------------------------------------------------------------
# device coefficients


def test_coefficients_zero_below_eta():
    wv = WeightedValues([1.0, 2.0], [0.5, 0.5])
    c = smoothed_device_coefficients(wv, 0.5, 0.3, 5.0)
    assert np.all(c == 0.0)


def test_coefficients_saturate_above():
    wv = WeightedValues([10.0, 11.0], [0.4, 0.6])
    c = smoothed_device_coefficients(wv, 0.5, 0.3, 1.0)
    assert np.allclose(c, np.array([0.4, 0.6]) / 0.5)


def test_coefficients_two_point_example():
    wv = WeightedValues([1.0, 3.0], [0.5, 0.5])
    c = smoothed_device_coefficients(wv, 0.5, 1.0, 2.5)
    assert c[0] == 0.0
    assert c[1] == pytest.approx(0.5, abs=1e-12)


def test_coefficients_sum_to_one_at_minimizer():
    # at an exact stationary point of eta the coefficients form a convex
    # combination; that identity is what makes the model update an average
    rng = np.random.default_rng(19)
    for _ in range(200):
        wv = random_instance(rng)
        theta = float(rng.uniform(0.05, 0.95))
        nu = float(rng.uniform(0.01, 1.0))
        lo, hi = smoothed_eta_minimizers(wv, theta, nu)
        for eta in {lo, hi}:
            c = smoothed_device_coefficients(wv, theta, nu, eta)
            assert np.all(c >= 0.0)
            assert float(c.sum()) <= 1.0 / theta + 1e-12
            if abs(smoothed_objective_slope(wv, theta, nu, eta)) <= 1e-12:
                assert float(c.sum()) == pytest.approx(1.0, abs=1e-9)


def test_coefficients_match_fd_in_values():
    # moving one sample value moves the objective by its coefficient
    rng = np.random.default_rng(20)
    h = 1e-7
    for _ in range(100):
        wv = random_instance(rng, n=4)
        theta, nu = 0.5, 0.3
        eta = float(rng.normal() * 2)
        c = smoothed_device_coefficients(wv, theta, nu, eta)
        for k in range(4):
            bumped_hi = wv.values.copy()
            bumped_lo = wv.values.copy()
            bumped_hi[k] += h
            bumped_lo[k] -= h
            fd = (
                smoothed_objective(WeightedValues(bumped_hi, wv.weights), theta, nu, eta)
                - smoothed_objective(WeightedValues(bumped_lo, wv.weights), theta, nu, eta)
            ) / (2 * h)
            assert fd == pytest.approx(c[k], abs=1e-5)


def test_joint_convexity_midpoint():
    # quadratic per-device losses keep the tail objective convex in (w, eta)
    rng = np.random.default_rng(21)
    centers = rng.normal(size=(4, 3))
    alpha = np.full(4, 0.25)
    theta, nu = 0.6, 0.2

    def tail_obj(w, eta):
        losses = np.array([float(np.sum((w - c) ** 2)) for c in centers])
        return smoothed_objective(WeightedValues(losses, alpha), theta, nu, eta)

    for _ in range(100):
        w1, w2 = rng.normal(size=(2, 3))
        e1, e2 = rng.normal(size=2) * 3
        mid = tail_obj(0.5 * (w1 + w2), 0.5 * (e1 + e2))
        assert mid <= 0.5 * (tail_obj(w1, e1) + tail_obj(w2, e2)) + 1e-12
