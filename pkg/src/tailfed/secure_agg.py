"""Simulated secure aggregation and a quantile protocol built on top of it.

The server only ever needs weighted averages. In masked mode each client
perturbs its contribution with pairwise antisymmetric noise derived from a
shared seed; the noise cancels in the sum, so the server learns the average
while every individual payload it sees is masked. A transcript records what
crossed the wire so tests can audit exactly that.

The quantile protocol reformulates quantile estimation as minimization of
the pinball loss and runs a majorize-minimize iteration whose two sums per
step (numerator and denominator) are themselves computed through the
aggregator, so it composes with masking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .superquantile import WeightedValues

Contribution = tuple[np.ndarray, float]
Aggregator = Callable[[Sequence[Contribution]], np.ndarray]

# Floor for majorize-minimize denominators; also the coincidence tolerance
# for snapping onto a data point.
MM_CLIP = 1e-12
DEFAULT_MASK_SCALE = 1e3


@dataclass
class TranscriptMessage:
    sender: str
    receiver: str
    kind: str
    payload: np.ndarray

    def to_dict(self) -> dict:
        return {
            "sender": self.sender,
            "receiver": self.receiver,
            "kind": self.kind,
            "dim": int(self.payload.size),
            "payload": self.payload.tolist(),
        }


@dataclass
class AggregationTranscript:
    mode: str
    messages: list[TranscriptMessage] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def server_visible(self) -> list[np.ndarray]:
        return [m.payload for m in self.messages if m.receiver == "server"]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "messages": [m.to_dict() for m in self.messages],
            "flags": list(self.flags),
        }


def _check_contributions(contributions: Sequence[Contribution]) -> tuple[list[np.ndarray], np.ndarray]:
    if len(contributions) == 0:
        raise ValueError("aggregation needs at least one contribution")
    vectors = []
    weights = []
    dim = None
    for v, w in contributions:
        v = np.atleast_1d(np.asarray(v, dtype=np.float64))
        if v.ndim != 1:
            raise ValueError("contributions must be vectors")
        if dim is None:
            dim = v.size
        elif v.size != dim:
            raise ValueError("contributions must share one dimension")
        w = float(w)
        if not (w > 0.0):
            raise ValueError(f"contribution weights must be positive, got {w!r}")
        vectors.append(v)
        weights.append(w)
    return vectors, np.asarray(weights, dtype=np.float64)


def plain_weighted_sum(contributions: Sequence[Contribution]) -> np.ndarray:
    """Weighted average of the contributions, weights renormalized over the set."""
    vectors, weights = _check_contributions(contributions)
    total = np.zeros_like(vectors[0])
    for v, w in zip(vectors, weights):
        total += w * v
    return total / weights.sum()


def _pair_mask(pairwise_seed: int, i: int, j: int, dim: int, scale: float) -> np.ndarray:
    seq = np.random.SeedSequence(entropy=(int(pairwise_seed) & ((1 << 63) - 1), i, j))
    return np.random.default_rng(seq).normal(0.0, scale, size=dim)


def masked_weighted_sum(
    contributions: Sequence[Contribution],
    pairwise_seed: int,
    mask_scale: float = DEFAULT_MASK_SCALE,
) -> tuple[np.ndarray, AggregationTranscript]:
    """Weighted average computed from masked payloads.

    Each client sends [w_k * v_k, w_k] plus pairwise antisymmetric masks; the
    masks cancel when the server adds the payloads, leaving the exact
    numerator and denominator. A single contributor cannot be masked, so that
    case degenerates to the plain path and is flagged on the transcript.
    """
    vectors, weights = _check_contributions(contributions)
    n = len(vectors)
    dim = vectors[0].size
    transcript = AggregationTranscript(mode="masked")
    if n == 1:
        transcript.flags.append("single_contributor_unmasked")
        payload = np.concatenate([weights[0] * vectors[0], [weights[0]]])
        transcript.messages.append(TranscriptMessage("client000", "server", "plain_update", payload))
        return vectors[0].copy(), transcript
    payload_sum = np.zeros(dim + 1)
    for i in range(n):
        payload = np.concatenate([weights[i] * vectors[i], [weights[i]]])
        for j in range(n):
            if j == i:
                continue
            lo, hi = min(i, j), max(i, j)
            mask = _pair_mask(pairwise_seed, lo, hi, dim + 1, mask_scale)
            payload = payload + mask if i < j else payload - mask
        transcript.messages.append(TranscriptMessage(f"client{i:03d}", "server", "masked_update", payload))
        payload_sum += payload
    return payload_sum[:dim] / payload_sum[dim], transcript


def audit_transcript(
    transcript: AggregationTranscript, contributions: Sequence[Contribution]
) -> dict:
    """Compare server-visible payloads against raw contributions.

    Returns the smallest relative distance between any payload and any raw
    contribution (both the bare vector and its weighted form are checked).
    In masked mode a healthy transcript keeps this far above 1e-9.
    """
    vectors, weights = _check_contributions(contributions)
    raws = []
    for v, w in zip(vectors, weights):
        raws.append(np.concatenate([w * v, [w]]))
        raws.append(np.concatenate([v, [w]]))
    min_rel = np.inf
    for payload in transcript.server_visible():
        for raw in raws:
            if payload.size != raw.size:
                continue
            denom = max(float(np.linalg.norm(raw)), 1.0)
            min_rel = min(min_rel, float(np.linalg.norm(payload - raw)) / denom)
    leaked = transcript.mode == "masked" and not transcript.flags and min_rel <= 1e-9
    return {"min_relative_distance": min_rel, "leaked": bool(leaked), "flags": list(transcript.flags)}


def make_masked_aggregator(
    pairwise_seed: int,
    mask_scale: float = DEFAULT_MASK_SCALE,
    transcripts: list[AggregationTranscript] | None = None,
) -> Aggregator:
    """Aggregator closure over masked_weighted_sum; each call gets a fresh sub-seed."""
    calls = [0]

    def _agg(contributions: Sequence[Contribution]) -> np.ndarray:
        seq = np.random.SeedSequence(entropy=(int(pairwise_seed) & ((1 << 63) - 1), calls[0]))
        sub_seed = int(seq.generate_state(1, np.uint64)[0])
        calls[0] += 1
        result, transcript = masked_weighted_sum(contributions, sub_seed, mask_scale)
        if transcripts is not None:
            transcripts.append(transcript)
        return result

    return _agg


@dataclass(frozen=True)
class PinballSpec:
    """A weighted sample plus the quantile level tau in (0, 1)."""

    values: np.ndarray
    weights: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        wv = WeightedValues(self.values, self.weights)
        object.__setattr__(self, "values", wv.values)
        object.__setattr__(self, "weights", wv.weights)
        if not (0.0 < self.tau < 1.0):
            raise ValueError(f"tau must lie strictly inside (0, 1), got {self.tau!r}")


def pinball_loss(spec: PinballSpec, mu: float) -> float:
    """Weighted pinball (quantile regression) loss at threshold mu."""
    rho = spec.values - float(mu)
    per = np.where(rho >= 0.0, spec.tau * rho, (spec.tau - 1.0) * rho)
    return float(np.dot(spec.weights, per))


@dataclass
class MMQuantileResult:
    value: float
    converged: bool
    iterations: int
    trace: list[float]

    def pinball_trace(self, spec: PinballSpec) -> list[float]:
        return [pinball_loss(spec, mu) for mu in self.trace]


def _quantile_optimal(spec: PinballSpec, c: float) -> bool:
    """Whether c minimizes the pinball loss over the sample.

    A point is a tau-quantile exactly when the weight strictly below it does
    not exceed tau and the weight at-or-below it reaches tau. Comparisons get
    a 1e-12 collar so float dust in cumulative sums cannot flip the verdict.
    """
    below = float(spec.weights[spec.values < c - MM_CLIP].sum())
    at_or_below = float(spec.weights[spec.values <= c + MM_CLIP].sum())
    return below - 1e-12 <= spec.tau <= at_or_below + 1e-12


def _descent_step_off(spec: PinballSpec, c: float) -> float:
    """Move off a non-optimal data point, halfway toward its neighbor on the
    side the pinball loss decreases. The loss is linear between adjacent data
    points, so the half-gap step strictly decreases it."""
    x = spec.values
    at_or_below = float(spec.weights[x <= c + MM_CLIP].sum())
    if spec.tau > at_or_below:
        above = x[x > c + MM_CLIP]
        return 0.5 * (c + float(above.min()))
    under = x[x < c - MM_CLIP]
    return 0.5 * (c + float(under.max()))


def mm_quantile(
    spec: PinballSpec,
    max_iters: int = 500,
    tol: float = 1e-10,
    aggregator: Aggregator | None = None,
    init: float | None = None,
) -> MMQuantileResult:
    """Majorize-minimize iteration for the tau-quantile of a weighted sample.

    Each step solves the quadratic majorizer of the pinball loss at the
    current iterate:

        mu <- (sum_k beta_k x_k + (2 tau - 1)) / sum_k beta_k,
        beta_k = a_k / |x_k - mu|.

    Both sums are obtained through two aggregator calls, so the server never
    handles per-device values directly when a masking aggregator is passed.
    An iterate that lands on a data point stays there under the update rule,
    so it is returned once it passes the optimality check and stepped off
    otherwise. Non-convergence within max_iters returns the best iterate with
    converged=False.

    init overrides the default starting point (the weighted mean, nudged off
    the data points); starting exactly on a minimizing data point returns it
    immediately.
    """
    if aggregator is None:
        aggregator = plain_weighted_sum
    x, a = spec.values, spec.weights
    span = float(x.max() - x.min())
    if span == 0.0:
        return MMQuantileResult(float(x[0]), True, 0, [float(x[0])])
    mu = float(init) if init is not None else float(np.dot(a, x)) + 1e-9 * span
    trace = [mu]
    for it in range(1, max_iters + 1):
        dist = np.abs(x - mu)
        nearest = int(np.argmin(dist))
        if dist[nearest] <= MM_CLIP:
            hit = float(x[nearest])
            if _quantile_optimal(spec, hit):
                trace.append(hit)
                return MMQuantileResult(hit, True, it, trace)
            # Returning here would hand back a non-minimizer; the beta clip
            # alone cannot pull the iterate off the point either. A half-gap
            # step in the descent direction restarts the iteration cleanly.
            mu = _descent_step_off(spec, hit)
            trace.append(mu)
            continue
        beta = a / np.maximum(dist, MM_CLIP)
        num = float(aggregator([(np.array([b * v]), 1.0) for b, v in zip(beta, x)])[0]) * x.size
        den = float(aggregator([(np.array([b]), 1.0) for b in beta])[0]) * x.size
        mu_next = (num + (2.0 * spec.tau - 1.0)) / den
        # A minimizer of a discrete pinball loss is always a data point, and
        # the plain iteration only crawls into it geometrically. Once the
        # nearest point passes the quantile optimality check, finishing there
        # is exact and cannot increase the loss.
        near = float(x[np.argmin(np.abs(x - mu_next))])
        if _quantile_optimal(spec, near) and pinball_loss(spec, near) <= pinball_loss(spec, mu_next):
            trace.append(near)
            return MMQuantileResult(near, True, it, trace)
        trace.append(mu_next)
        if abs(mu_next - mu) <= tol:
            return MMQuantileResult(mu_next, True, it, trace)
        mu = mu_next
    best = min(trace, key=lambda m: pinball_loss(spec, m))
    return MMQuantileResult(best, False, max_iters, trace)


def secure_quantile_for_round(
    losses: Sequence[float],
    weights: Sequence[float],
    theta: float,
    aggregator: Aggregator | None = None,
    max_iters: int = 500,
    tol: float = 1e-10,
) -> float:
    """(1-theta)-quantile of reported losses via the aggregated MM protocol.

    theta = 1 short-circuits to the minimum loss so that every reporting
    device passes the subsequent filter. A single device returns its own loss.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 1:
        return float(losses[0])
    if float(theta) == 1.0:
        return float(losses.min())
    w = np.asarray(weights, dtype=np.float64)
    spec = PinballSpec(losses, w / w.sum(), tau=1.0 - float(theta))
    return mm_quantile(spec, max_iters=max_iters, tol=tol, aggregator=aggregator).value
