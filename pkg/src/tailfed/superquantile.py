"""Weighted quantiles, tail means, and their smooth surrogates.

The central object is a finite loss profile: values ``x_k`` carrying
probability weights ``a_k``. The tail objective at conformity level
``theta`` is

    eta + (1/theta) * sum_k a_k * max(x_k - eta, 0)

minimized over ``eta``; the minimum value is the superquantile (the mean of
the worst ``theta``-fraction of the profile) and a minimizer is the
``(1-theta)``-quantile. The smooth variants replace the positive part with a
quadratically rounded hinge of width ``nu``, which keeps every quantity
differentiable while staying within ``nu/(2*theta)`` of the exact objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Tolerance for probability mass checks and tie decisions.
EPS = 1e-12
# Weight vectors whose sum is further than this from 1 are rejected outright;
# anything closer is silently renormalized.
RENORM_TOL = 1e-9


def _prob_weights(weights: np.ndarray, *, positive: bool, name: str) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d array")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{name} must be finite")
    if positive:
        if np.any(w <= 0.0):
            raise ValueError(f"{name} must be strictly positive")
    elif np.any(w < 0.0):
        raise ValueError(f"{name} must be nonnegative")
    total = float(w.sum())
    if abs(total - 1.0) > RENORM_TOL:
        raise ValueError(f"{name} must sum to 1, got {total!r}")
    if abs(total - 1.0) > EPS:
        w = w / total
    return w


def check_conformity(theta: float) -> float:
    theta = float(theta)
    if not (0.0 < theta <= 1.0):
        raise ValueError(f"conformity level must lie in (0, 1], got {theta!r}")
    return theta


def check_smoothing(nu: float) -> float:
    nu = float(nu)
    if not (nu > 0.0) or not np.isfinite(nu):
        raise ValueError(f"smoothing width must be positive, got {nu!r}")
    return nu


@dataclass(frozen=True)
class ConformityLevel:
    """Fraction of the loss profile the tail objective averages over, in (0, 1]."""

    theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", check_conformity(self.theta))


@dataclass(frozen=True)
class SmoothingParam:
    """Width of the quadratic rounding applied to the hinge, > 0."""

    nu: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "nu", check_smoothing(self.nu))


class WeightedValues:
    """A finite distribution: values with strictly positive probability weights.

    Weights must sum to 1 within ``RENORM_TOL``; small drift is renormalized
    on construction.
    """

    __slots__ = ("values", "weights")

    def __init__(self, values, weights) -> None:
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("values must be a non-empty 1-d array")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        w = _prob_weights(np.asarray(weights), positive=True, name="weights")
        if w.shape != v.shape:
            raise ValueError("values and weights must have matching length")
        self.values = v
        self.weights = w

    def __len__(self) -> int:
        return int(self.values.size)

    def mean(self) -> float:
        return float(np.dot(self.values, self.weights))


class MixtureWeights:
    """A reweighting of devices: nonnegative entries summing to 1."""

    __slots__ = ("pi",)

    def __init__(self, pi) -> None:
        self.pi = _prob_weights(np.asarray(pi), positive=False, name="pi")

    def __len__(self) -> int:
        return int(self.pi.size)


def _mixture_array(pi) -> np.ndarray:
    if isinstance(pi, MixtureWeights):
        return pi.pi
    return _prob_weights(np.asarray(pi), positive=False, name="pi")


def conformity(pi, alpha) -> float:
    """min_k alpha_k / pi_k, the level down to which ``pi`` stays feasible.

    Entries with pi_k = 0 contribute +inf and drop out of the minimum.
    """
    p = _mixture_array(pi)
    a = _prob_weights(np.asarray(alpha), positive=True, name="alpha")
    if p.shape != a.shape:
        raise ValueError("pi and alpha must have matching length")
    ratios = np.full_like(a, np.inf)
    mask = p > 0.0
    ratios[mask] = a[mask] / p[mask]
    return float(ratios.min())


def in_feasible_set(pi, alpha, theta: float) -> bool:
    """Whether pi_k <= alpha_k / theta for all k, up to EPS slack."""
    p = _mixture_array(pi)
    a = _prob_weights(np.asarray(alpha), positive=True, name="alpha")
    theta = check_conformity(theta)
    if p.shape != a.shape:
        raise ValueError("pi and alpha must have matching length")
    return bool(np.all(p <= a / theta + EPS))


def _sorted_profile(wv: WeightedValues) -> tuple[np.ndarray, np.ndarray]:
    # Stable sort keeps equal values in original order, which makes every
    # downstream tie decision deterministic.
    order = np.argsort(wv.values, kind="stable")
    return wv.values[order], wv.weights[order]


def weighted_quantile(wv: WeightedValues, theta: float) -> float:
    """The (1-theta)-quantile: smallest value whose cumulative weight reaches 1-theta.

    theta = 1 returns the minimum value.
    """
    theta = check_conformity(theta)
    x, a = _sorted_profile(wv)
    cum = np.cumsum(a)
    # EPS slack absorbs cumulative-sum dust at exact-tie boundaries.
    j = int(np.searchsorted(cum, (1.0 - theta) - EPS, side="left"))
    j = min(j, x.size - 1)
    return float(x[j])


def superquantile(wv: WeightedValues, theta: float) -> float:
    """Mean of the worst theta-fraction of the profile. theta = 1 is the plain mean."""
    theta = check_conformity(theta)
    if theta == 1.0:
        return wv.mean()
    eta = weighted_quantile(wv, theta)
    excess = np.maximum(wv.values - eta, 0.0)
    return eta + float(np.dot(wv.weights, excess)) / theta


def smoothed_plus(rho, nu: float):
    """Quadratically rounded positive part.

    Equal to nu/2 for rho <= 0, rho^2/(2 nu) + nu/2 on (0, nu], and rho
    beyond nu. Continuously differentiable, 1-Lipschitz, and dominates the
    hinge max(rho, 0) by at most nu/2.
    """
    nu = check_smoothing(nu)
    r = np.asarray(rho, dtype=np.float64)
    out = np.where(r <= 0.0, nu / 2.0, np.where(r <= nu, r * r / (2.0 * nu) + nu / 2.0, r))
    if out.ndim == 0:
        return float(out)
    return out


def smoothed_plus_derivative(rho, nu: float):
    """Derivative of smoothed_plus: 0 below 0, rho/nu on (0, nu], then 1."""
    nu = check_smoothing(nu)
    r = np.asarray(rho, dtype=np.float64)
    out = np.where(r <= 0.0, 0.0, np.where(r <= nu, r / nu, 1.0))
    if out.ndim == 0:
        return float(out)
    return out


def plus_objective(wv: WeightedValues, theta: float, eta: float) -> float:
    """The exact (nonsmooth) tail objective at a fixed threshold eta."""
    theta = check_conformity(theta)
    excess = np.maximum(wv.values - float(eta), 0.0)
    return float(eta) + float(np.dot(wv.weights, excess)) / theta


def smoothed_objective(wv: WeightedValues, theta: float, nu: float, eta: float) -> float:
    """Smooth tail objective: eta + (1/theta) sum_k a_k g_nu(x_k - eta)."""
    theta = check_conformity(theta)
    nu = check_smoothing(nu)
    g = smoothed_plus(wv.values - float(eta), nu)
    return float(eta) + float(np.dot(wv.weights, g)) / theta


def smoothed_objective_slope(wv: WeightedValues, theta: float, nu: float, eta: float) -> float:
    """d/d eta of the smooth tail objective."""
    theta = check_conformity(theta)
    nu = check_smoothing(nu)
    gp = smoothed_plus_derivative(wv.values - float(eta), nu)
    return 1.0 - float(np.dot(wv.weights, gp)) / theta


def smoothed_eta_minimizers(wv: WeightedValues, theta: float, nu: float) -> tuple[float, float]:
    """Closed interval of minimizers of eta -> smoothed_objective(wv, theta, nu, eta).

    The slope is continuous, nondecreasing, and piecewise linear with
    breakpoints at every x_k and x_k - nu, so it suffices to evaluate it at
    those points and interpolate the sign change. For theta = 1 the objective
    is flat on (-inf, min x - nu]; the right endpoint of that ray is returned
    as the canonical (degenerate) interval.
    """
    theta = check_conformity(theta)
    nu = check_smoothing(nu)
    if theta == 1.0:
        lo = float(wv.values.min() - nu)
        return (lo, lo)
    cand = np.unique(np.concatenate([wv.values, wv.values - nu]))
    slopes = np.array([smoothed_objective_slope(wv, theta, nu, c) for c in cand])
    nonneg = cand[slopes >= 0.0]
    nonpos = cand[slopes <= 0.0]
    # The slope is 1 - 1/theta < 0 at min(x) - nu and 1 > 0 at max(x), so
    # neither candidate set is empty.
    a = float(nonneg.min())
    b = float(nonpos.max())
    slope_a = smoothed_objective_slope(wv, theta, nu, a)
    if slope_a > 0.0:
        # Unique root strictly between b and a; the slope is linear there.
        slope_b = smoothed_objective_slope(wv, theta, nu, b)
        root = b + (-slope_b) * (a - b) / (slope_a - slope_b)
        return (root, root)
    return (a, b)


def smoothed_eta_star(wv: WeightedValues, theta: float, nu: float) -> float:
    """Midpoint of the minimizer interval, the canonical scalar threshold."""
    lo, hi = smoothed_eta_minimizers(wv, theta, nu)
    return 0.5 * (lo + hi)


def smoothed_device_coefficients(wv: WeightedValues, theta: float, nu: float, eta: float) -> np.ndarray:
    """Per-value gradient weights c_k = (a_k / theta) g_nu'(x_k - eta).

    These are the coefficients the tail objective places on each device's
    gradient: nonnegative, zero exactly on values at or below eta, and
    summing to at most 1/theta.
    """
    theta = check_conformity(theta)
    nu = check_smoothing(nu)
    gp = smoothed_plus_derivative(wv.values - float(eta), nu)
    return wv.weights * gp / theta
