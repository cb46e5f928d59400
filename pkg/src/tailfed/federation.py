"""Federated training loops: the tail-focused method, its uniform-averaging
baseline, and an idealized alternating-minimization variant.

One communication round samples devices, optionally filters them to those
whose reported loss reaches the round threshold (the sample's
(1-theta)-quantile), runs local SGD on the survivors, and aggregates the
resulting parameters by a weighted average, plain or masked.

The alternating-minimization path works on full-batch device objectives:
an exact closed-form threshold step alternates with an inexact parameter
step whose suboptimality is driven below a summable tolerance sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import models
from .data import DeviceShard, Population
from .models import LossSpec
from .secure_agg import (
    make_masked_aggregator,
    masked_weighted_sum,
    plain_weighted_sum,
    secure_quantile_for_round,
)
from .superquantile import (
    WeightedValues,
    check_conformity,
    check_smoothing,
    plus_objective,
    smoothed_device_coefficients,
    smoothed_eta_star,
    smoothed_objective,
    smoothed_objective_slope,
    superquantile,
    weighted_quantile,
)

FILTER_SLACK = 1e-12

AGGREGATION_MODES = ("plain", "masked")
ETA_PROTOCOLS = ("server_direct", "secure_mm")


@dataclass
class FederationConfig:
    theta: float = 1.0
    nu: float = 1e-3
    devices_per_round: int = 10
    n_local: int = 1
    local_epoch: bool = True  # one shuffled pass of mini-batch SGD instead of n_local point steps
    batch_size: int = 10
    lr0: float = 0.1
    lr_decay: float = 1.0
    lr_decay_every: int = 1
    num_rounds: int = 100
    eta_period: int = 1
    seed: int = 0
    loss: LossSpec = field(default_factory=lambda: LossSpec("binary_logistic"))
    aggregation: str = "plain"
    eta_protocol: str = "server_direct"

    def __post_init__(self) -> None:
        check_conformity(self.theta)
        check_smoothing(self.nu)
        if self.devices_per_round < 1:
            raise ValueError("devices_per_round must be >= 1")
        if self.n_local < 1:
            raise ValueError("n_local must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.lr0 > 0.0):
            raise ValueError("lr0 must be positive")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if self.num_rounds < 0:
            raise ValueError("num_rounds must be >= 0")
        if self.eta_period < 1:
            raise ValueError("eta_period must be >= 1")
        if self.aggregation not in AGGREGATION_MODES:
            raise ValueError(f"aggregation must be one of {AGGREGATION_MODES}")
        if self.eta_protocol not in ETA_PROTOCOLS:
            raise ValueError(f"eta_protocol must be one of {ETA_PROTOCOLS}")


@dataclass
class RoundLog:
    round_index: int
    sampled_ids: list[str]
    eta: float | None
    filtered_ids: list[str]
    pre_objective: float
    post_objective: float
    update_norm: float

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "sampled_ids": list(self.sampled_ids),
            "eta": self.eta,
            "filtered_ids": list(self.filtered_ids),
            "pre_objective": self.pre_objective,
            "post_objective": self.post_objective,
            "update_norm": self.update_norm,
        }


@dataclass
class EvalSnapshot:
    round_index: int
    params: np.ndarray
    device_losses: dict[str, float]


@dataclass
class FederatedRun:
    params: np.ndarray
    rounds: list[RoundLog]
    snapshots: list[EvalSnapshot]


def lr_schedule(cfg: FederationConfig, t: int) -> float:
    """Step size for round t: lr0 * lr_decay ** floor(t / lr_decay_every)."""
    return cfg.lr0 * cfg.lr_decay ** (t // cfg.lr_decay_every)


def local_update(
    shard: DeviceShard,
    w: np.ndarray,
    lr: float,
    cfg: FederationConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Local SGD pass on one device, starting from the broadcast parameters.

    Epoch mode shuffles the shard once and walks it in mini-batches; point
    mode performs n_local single-example steps sampled with replacement.
    """
    w = np.array(w, dtype=np.float64)
    n = len(shard)
    if cfg.local_epoch:
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grad = models.batch_grad(cfg.loss, w, shard.features[idx], shard.labels[idx])
            w -= lr * grad
    else:
        for _ in range(cfg.n_local):
            i = int(rng.integers(n))
            grad = models.batch_grad(cfg.loss, w, shard.features[i : i + 1], shard.labels[i : i + 1])
            w -= lr * grad
    return w


def _round_rng(cfg: FederationConfig, t: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=(int(cfg.seed) & ((1 << 63) - 1), 2, int(t)))
    return np.random.default_rng(seq)


def _sample_devices(pop: Population, cfg: FederationConfig, rng: np.random.Generator) -> list[int]:
    # Uniform sampling with replacement; duplicates collapse to one slot.
    draws = rng.integers(0, len(pop), size=cfg.devices_per_round)
    return sorted({int(i) for i in draws})


def _prepare_round(
    pop: Population, cfg: FederationConfig, rng: np.random.Generator
) -> tuple[list[int], dict[int, int], int | None]:
    idx = _sample_devices(pop, cfg, rng)
    local_seeds = {k: int(rng.integers(1 << 62)) for k in idx}
    mask_seed = int(rng.integers(1 << 62)) if cfg.aggregation == "masked" else None
    return idx, local_seeds, mask_seed


def _aggregate(
    contributions: list[tuple[np.ndarray, float]], cfg: FederationConfig, mask_seed: int | None
) -> np.ndarray:
    if cfg.aggregation == "masked":
        result, _ = masked_weighted_sum(contributions, mask_seed)
        return result
    return plain_weighted_sum(contributions)


def _sample_objective(losses: list[float], weights: list[float], theta: float) -> float:
    wv = WeightedValues(np.asarray(losses), np.asarray(weights))
    return superquantile(wv, theta)


def deltafl_round(
    pop: Population,
    w: np.ndarray,
    cfg: FederationConfig,
    t: int,
    rng: np.random.Generator | None = None,
    eta_override: float | None = None,
) -> tuple[np.ndarray, RoundLog]:
    """One round of tail-filtered training.

    Sampled devices report losses; the round threshold eta is the sample's
    (1-theta)-quantile (or a frozen value passed by the caller); devices at
    or above eta run local updates and are averaged. theta = 1 keeps every
    sampled device, reproducing the uniform-averaging baseline exactly.
    """
    if rng is None:
        rng = _round_rng(cfg, t)
    idx, local_seeds, mask_seed = _prepare_round(pop, cfg, rng)
    shards = [pop.shards[k] for k in idx]
    losses = [models.device_loss(cfg.loss, w, s) for s in shards]
    sample_weights = np.array([s.weight for s in shards])
    sample_weights = sample_weights / sample_weights.sum()

    if eta_override is not None:
        eta = float(eta_override)
    elif cfg.theta == 1.0:
        eta = float(min(losses))
    elif cfg.eta_protocol == "secure_mm":
        agg = make_masked_aggregator(mask_seed) if cfg.aggregation == "masked" else None
        eta = secure_quantile_for_round(losses, sample_weights, cfg.theta, aggregator=agg)
    else:
        eta = weighted_quantile(WeightedValues(np.asarray(losses), sample_weights), cfg.theta)

    survivors = [k for k, loss in zip(idx, losses) if loss >= eta - FILTER_SLACK]
    if not survivors:
        # Degenerate threshold (can only arise from protocol noise): fall
        # back to the single worst device so the round still makes progress.
        worst = idx[int(np.argmax(losses))]
        survivors = [worst]

    lr = lr_schedule(cfg, t)
    contributions = []
    for k in survivors:
        local = local_update(pop.shards[k], w, lr, cfg, np.random.default_rng(local_seeds[k]))
        contributions.append((local, pop.shards[k].weight))
    w_next = _aggregate(contributions, cfg, mask_seed)

    post_losses = [models.device_loss(cfg.loss, w_next, s) for s in shards]
    log = RoundLog(
        round_index=t,
        sampled_ids=[pop.shards[k].device_id for k in idx],
        eta=eta,
        filtered_ids=[pop.shards[k].device_id for k in survivors],
        pre_objective=_sample_objective(losses, list(sample_weights), cfg.theta),
        post_objective=_sample_objective(post_losses, list(sample_weights), cfg.theta),
        update_norm=float(np.linalg.norm(w_next - w)),
    )
    return w_next, log


def fedavg_round(
    pop: Population,
    w: np.ndarray,
    cfg: FederationConfig,
    t: int,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, RoundLog]:
    """One round of uniform-averaging training: no loss reports, no filter."""
    if rng is None:
        rng = _round_rng(cfg, t)
    idx, local_seeds, mask_seed = _prepare_round(pop, cfg, rng)
    shards = [pop.shards[k] for k in idx]
    sample_weights = np.array([s.weight for s in shards])
    sample_weights = sample_weights / sample_weights.sum()

    lr = lr_schedule(cfg, t)
    contributions = []
    for k in idx:
        local = local_update(pop.shards[k], w, lr, cfg, np.random.default_rng(local_seeds[k]))
        contributions.append((local, pop.shards[k].weight))
    w_next = _aggregate(contributions, cfg, mask_seed)

    losses = [models.device_loss(cfg.loss, w, s) for s in shards]
    post_losses = [models.device_loss(cfg.loss, w_next, s) for s in shards]
    log = RoundLog(
        round_index=t,
        sampled_ids=[s.device_id for s in shards],
        eta=None,
        filtered_ids=[s.device_id for s in shards],
        pre_objective=_sample_objective(losses, list(sample_weights), 1.0),
        post_objective=_sample_objective(post_losses, list(sample_weights), 1.0),
        update_norm=float(np.linalg.norm(w_next - w)),
    )
    return w_next, log


def run_federated(
    pop: Population,
    cfg: FederationConfig,
    algorithm: str = "deltafl",
    eval_every: int = 0,
    w0: np.ndarray | None = None,
) -> FederatedRun:
    """Drive num_rounds rounds of the chosen algorithm from w0 (zeros by default).

    The round threshold is recomputed every eta_period rounds and frozen in
    between (the sampled set still changes each round). Snapshots of all
    per-device losses are recorded every eval_every rounds when requested.
    """
    if algorithm not in ("deltafl", "fedavg"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    w = (
        np.array(w0, dtype=np.float64)
        if w0 is not None
        else models.init_params(cfg.loss, pop.feature_dim)
    )
    logs: list[RoundLog] = []
    snapshots: list[EvalSnapshot] = []
    frozen_eta: float | None = None
    for t in range(cfg.num_rounds):
        if algorithm == "fedavg":
            w, log = fedavg_round(pop, w, cfg, t)
        else:
            refresh = (t % cfg.eta_period == 0) or frozen_eta is None
            w, log = deltafl_round(pop, w, cfg, t, eta_override=None if refresh else frozen_eta)
            frozen_eta = log.eta
        logs.append(log)
        if eval_every > 0 and (t + 1) % eval_every == 0:
            snapshots.append(
                EvalSnapshot(
                    round_index=t,
                    params=w.copy(),
                    device_losses={
                        s.device_id: models.device_loss(cfg.loss, w, s) for s in pop.shards
                    },
                )
            )
    return FederatedRun(params=w, rounds=logs, snapshots=snapshots)


# ---------------------------------------------------------------------------
# Alternating minimization on full-batch device objectives.


@dataclass(frozen=True)
class DeviceObjective:
    """Full-batch value and gradient callables for one device."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    weight: float


def population_objectives(pop: Population, spec: LossSpec) -> list[DeviceObjective]:
    return [
        DeviceObjective(
            value=lambda w, s=s: models.device_loss(spec, w, s),
            grad=lambda w, s=s: models.device_grad(spec, w, s),
            weight=s.weight,
        )
        for s in pop.shards
    ]


def quadratic_objectives(centers, offsets=None, weights=None) -> list[DeviceObjective]:
    """Analytic devices F_k(w) = ||w - c_k||^2 + b_k, handy for exact studies."""
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    offsets = np.zeros(n) if offsets is None else np.asarray(offsets, dtype=np.float64)
    weights = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    return [
        DeviceObjective(
            value=lambda w, c=centers[k], b=offsets[k]: float(np.dot(w - c, w - c)) + float(b),
            grad=lambda w, c=centers[k]: 2.0 * (w - c),
            weight=float(weights[k]),
        )
        for k in range(n)
    ]


@dataclass(frozen=True)
class PowerLawSchedule:
    """Inexactness budgets eps_t = eps0 * (t + 1) ** (-exponent), exponent > 1.

    The exponent restriction keeps the series summable, which is what the
    convergence guarantee of the alternating scheme needs.
    """

    eps0: float
    exponent: float = 1.5

    def __post_init__(self) -> None:
        if not (self.eps0 > 0.0):
            raise ValueError("eps0 must be positive")
        if not (self.exponent > 1.0):
            raise ValueError("exponent must exceed 1 for a summable budget")

    def __call__(self, t: int) -> float:
        return self.eps0 * (t + 1) ** (-self.exponent)

    def total_bound(self) -> float:
        # Integral comparison: sum_{t>=0} (t+1)^-p <= 1 + 1/(p-1).
        return self.eps0 * (1.0 + 1.0 / (self.exponent - 1.0))


@dataclass
class CertifiedGradientDescent:
    """Parameter-step solver: monotone gradient descent with a stopping certificate.

    Stops once ||grad||^2 / (2 * strong_convexity) <= margin * eps. The
    modulus is caller-supplied (exact for quadratic devices, an estimate
    otherwise) and the margin buys slack against misestimation, so the
    returned point typically lands well inside the requested suboptimality.
    """

    strong_convexity: float = 1.0
    initial_step: float = 0.25
    margin: float = 1e-3
    max_iters: int = 200_000

    def solve(
        self,
        value_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
        w0: np.ndarray,
        eps: float,
    ) -> np.ndarray:
        target = 2.0 * self.strong_convexity * self.margin * eps
        w = np.array(w0, dtype=np.float64)
        f, g = value_grad(w)
        step = self.initial_step
        for _ in range(self.max_iters):
            sq = float(np.dot(g, g))
            if sq <= target:
                return w
            while True:
                w_try = w - step * g
                f_try, g_try = value_grad(w_try)
                if f_try <= f - 1e-4 * step * sq:
                    break
                step *= 0.5
                if step < 1e-18:
                    raise RuntimeError(
                        "parameter step stalled: no descent direction at "
                        f"gradient norm {math.sqrt(sq):.3e}"
                    )
            w, f, g = w_try, f_try, g_try
            step *= 2.0
        raise RuntimeError(
            f"parameter step failed to certify eps={eps:.3e} within "
            f"{self.max_iters} iterations (gradient norm {float(np.linalg.norm(g)):.3e})"
        )


@dataclass
class AMIterate:
    params: np.ndarray
    eta: float
    grad_norm: float
    eta_slope: float
    smoothed_value: float
    nonsmooth_value: float

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "grad_norm": self.grad_norm,
            "eta_slope": self.eta_slope,
            "smoothed_value": self.smoothed_value,
            "nonsmooth_value": self.nonsmooth_value,
        }


@dataclass
class AMResult:
    iterates: list[AMIterate]

    @property
    def params(self) -> np.ndarray:
        return self.iterates[-1].params

    @property
    def grad_norms(self) -> list[float]:
        return [it.grad_norm for it in self.iterates]


def _objective_state(
    objectives: Sequence[DeviceObjective], w: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    losses = np.array([obj.value(w) for obj in objectives])
    weights = np.array([obj.weight for obj in objectives])
    return losses, weights / weights.sum()


def _smoothed_grad_at(
    objectives: Sequence[DeviceObjective],
    losses: np.ndarray,
    weights: np.ndarray,
    w: np.ndarray,
    eta: float,
    theta: float,
    nu: float,
) -> tuple[np.ndarray, float]:
    wv = WeightedValues(losses, weights)
    coeff = smoothed_device_coefficients(wv, theta, nu, eta)
    grad_w = np.zeros_like(np.asarray(w, dtype=np.float64))
    for c, obj in zip(coeff, objectives):
        if c != 0.0:
            grad_w += c * obj.grad(w)
    slope = smoothed_objective_slope(wv, theta, nu, eta)
    return grad_w, slope


def smoothed_full_gradient(
    pop: Population, spec: LossSpec, w: np.ndarray, eta: float, theta: float, nu: float
) -> tuple[np.ndarray, float]:
    """Gradient of the smoothed tail objective over a population.

    Returns (parameter gradient, threshold partial derivative). The parameter
    gradient is the coefficient-weighted sum of device gradients.
    """
    objectives = population_objectives(pop, spec)
    losses, weights = _objective_state(objectives, w)
    return _smoothed_grad_at(objectives, losses, weights, np.asarray(w, float), eta, theta, nu)


def am_meta(
    objectives: Sequence[DeviceObjective],
    theta: float,
    nu: float,
    schedule: Callable[[int], float],
    solver: CertifiedGradientDescent,
    num_iters: int,
    w0: np.ndarray,
) -> AMResult:
    """Alternating minimization of the smoothed tail objective.

    Each iteration takes the exact closed-form threshold step, records the
    joint gradient norm at the fresh pair, then runs the certified parameter
    step against the inexactness budget schedule(t). The recorded threshold
    slope is zero after every threshold step up to roundoff, and the smoothed
    objective never increases by more than the budget between iterations.
    """
    theta = check_conformity(theta)
    nu = check_smoothing(nu)
    w = np.array(w0, dtype=np.float64)
    iterates: list[AMIterate] = []

    def record(w_cur: np.ndarray) -> float:
        losses, weights = _objective_state(objectives, w_cur)
        wv = WeightedValues(losses, weights)
        eta = smoothed_eta_star(wv, theta, nu)
        grad_w, slope = _smoothed_grad_at(objectives, losses, weights, w_cur, eta, theta, nu)
        iterates.append(
            AMIterate(
                params=w_cur.copy(),
                eta=eta,
                grad_norm=float(np.sqrt(np.dot(grad_w, grad_w) + slope * slope)),
                eta_slope=slope,
                smoothed_value=smoothed_objective(wv, theta, nu, eta),
                nonsmooth_value=plus_objective(wv, theta, eta),
            )
        )
        return eta

    eta = record(w)
    for t in range(num_iters):
        def value_grad(w_try: np.ndarray, eta_t=eta) -> tuple[float, np.ndarray]:
            losses, weights = _objective_state(objectives, w_try)
            wv = WeightedValues(losses, weights)
            val = smoothed_objective(wv, theta, nu, eta_t)
            grad_w, _ = _smoothed_grad_at(objectives, losses, weights, w_try, eta_t, theta, nu)
            return val, grad_w

        w = solver.solve(value_grad, w, schedule(t))
        eta = record(w)
    return AMResult(iterates)
