"""Loss models evaluated per example, per batch, and per device shard.

Three families are supported, each with analytic gradients and an optional
ridge term (reg/2)*||w||^2 folded into every loss value:

* ``squared_distance``: f(w; x) = ||x - w||^2, labels ignored.
* ``binary_logistic``: log(1 + exp(-y <w, x>)) with labels y in {-1, +1}.
* ``multinomial_logistic``: cross entropy of a C-way linear softmax; the
  parameter vector is the row-major flattening of the (C, p) weight matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOSS_KINDS = ("squared_distance", "binary_logistic", "multinomial_logistic")


@dataclass(frozen=True)
class LossSpec:
    kind: str
    l2_reg: float = 0.0
    num_classes: int = 2

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}, expected one of {LOSS_KINDS}")
        if self.l2_reg < 0.0:
            raise ValueError(f"l2_reg must be nonnegative, got {self.l2_reg!r}")
        if self.kind == "multinomial_logistic" and self.num_classes < 2:
            raise ValueError("multinomial_logistic needs num_classes >= 2")

    def param_dim(self, feature_dim: int) -> int:
        if self.kind == "multinomial_logistic":
            return self.num_classes * feature_dim
        return feature_dim


def init_params(spec: LossSpec, feature_dim: int) -> np.ndarray:
    return np.zeros(spec.param_dim(feature_dim), dtype=np.float64)


def _check_params(spec: LossSpec, w: np.ndarray, feature_dim: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    expected = spec.param_dim(feature_dim)
    if w.shape != (expected,):
        raise ValueError(f"parameter vector must have shape ({expected},), got {w.shape}")
    return w


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    # Max subtraction keeps the exponentials in range.
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + exp(z)) without overflow for large |z|.
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def batch_losses(spec: LossSpec, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example losses, ridge term included, as a length-n vector."""
    X = np.asarray(X, dtype=np.float64)
    w = _check_params(spec, w, X.shape[1])
    reg = 0.5 * spec.l2_reg * float(np.dot(w, w))
    if spec.kind == "squared_distance":
        diff = X - w[None, :]
        return np.einsum("ij,ij->i", diff, diff) + reg
    if spec.kind == "binary_logistic":
        margins = np.asarray(y, dtype=np.float64) * (X @ w)
        return _softplus(-margins) + reg
    W = w.reshape(spec.num_classes, X.shape[1])
    logp = _log_softmax(X @ W.T)
    idx = np.asarray(y, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= spec.num_classes):
        raise ValueError("class labels must lie in [0, num_classes)")
    return -logp[np.arange(X.shape[0]), idx] + reg


def batch_grad(spec: LossSpec, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean loss over the batch."""
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    w = _check_params(spec, w, p)
    if spec.kind == "squared_distance":
        grad = 2.0 * (w - X.mean(axis=0))
    elif spec.kind == "binary_logistic":
        yv = np.asarray(y, dtype=np.float64)
        margins = yv * (X @ w)
        # d/dm log(1+exp(-m)) = -sigmoid(-m)
        sig = 1.0 / (1.0 + np.exp(np.clip(margins, -500.0, 500.0)))
        grad = -(X * (yv * sig)[:, None]).mean(axis=0)
    else:
        W = w.reshape(spec.num_classes, p)
        probs = np.exp(_log_softmax(X @ W.T))
        idx = np.asarray(y, dtype=np.int64)
        probs[np.arange(n), idx] -= 1.0
        grad = (probs.T @ X / n).reshape(-1)
    return grad + spec.l2_reg * w


def point_loss(spec: LossSpec, w: np.ndarray, x: np.ndarray, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(batch_losses(spec, w, x[None, :], np.asarray([y]))[0])


def point_grad(spec: LossSpec, w: np.ndarray, x: np.ndarray, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return batch_grad(spec, w, x[None, :], np.asarray([y]))


def device_loss(spec: LossSpec, w: np.ndarray, shard) -> float:
    """Mean per-example loss over a shard."""
    if len(shard.labels) == 0:
        raise ValueError(f"device {shard.device_id!r} has no examples")
    return float(batch_losses(spec, w, shard.features, shard.labels).mean())


def device_grad(spec: LossSpec, w: np.ndarray, shard) -> np.ndarray:
    """Gradient of the mean loss over a shard."""
    if len(shard.labels) == 0:
        raise ValueError(f"device {shard.device_id!r} has no examples")
    return batch_grad(spec, w, shard.features, shard.labels)


def predict(spec: LossSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Hard class predictions. Ties resolve to the lowest class index."""
    X = np.asarray(X, dtype=np.float64)
    w = _check_params(spec, w, X.shape[1])
    if spec.kind == "squared_distance":
        raise ValueError("squared_distance has no classification rule")
    if spec.kind == "binary_logistic":
        # Zero margin counts as the negative class.
        return np.where(X @ w > 0.0, 1, -1)
    W = w.reshape(spec.num_classes, X.shape[1])
    return np.argmax(X @ W.T, axis=1)


def device_error(spec: LossSpec, w: np.ndarray, shard) -> float:
    """Fraction of shard examples the hard prediction gets wrong."""
    if len(shard.labels) == 0:
        raise ValueError(f"device {shard.device_id!r} has no examples")
    preds = predict(spec, w, shard.features)
    truth = np.asarray(shard.labels, dtype=np.int64)
    return float(np.mean(preds != truth))
