"""Prediction functions, their gradients, and a finite-difference checker.

Two scorer families are supported, both emitting a single scalar score:

* ``linear``: score(w, x) = w · x, with d = input_dim parameters.
* ``mlp1``: one tanh hidden layer without biases,
  score(w, x) = w_out · tanh(W_hidden @ x), parameters laid out as
  [W_hidden row-major, then w_out], d = input_dim·hidden_dim + hidden_dim.

tanh (smooth) is used rather than ReLU so the default model class has
Lipschitz gradients everywhere. All math is double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ScorerSpec:
    """Shape of a scoring function. param_count fixes the model dimension."""

    kind: str  # "linear" | "mlp1"
    input_dim: int
    hidden_dim: int = 0  # mlp1 only
    activation: str = "tanh"  # mlp1 only

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "mlp1"):
            raise ValueError(f"unknown scorer kind: {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.kind == "mlp1":
            if self.hidden_dim < 1:
                raise ValueError("hidden_dim must be positive for mlp1")
            if self.activation != "tanh":
                raise ValueError(f"unsupported activation: {self.activation!r}")

    @property
    def param_count(self) -> int:
        if self.kind == "linear":
            return self.input_dim
        return self.input_dim * self.hidden_dim + self.hidden_dim

    def _split(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """mlp1 parameter views: (hidden matrix, output vector)."""
        h, d = self.hidden_dim, self.input_dim
        return w[: h * d].reshape(h, d), w[h * d :]


def _check_dims(spec: ScorerSpec, w: np.ndarray, x: np.ndarray) -> None:
    if w.shape != (spec.param_count,):
        raise ValueError(
            f"parameter vector has length {w.shape}, expected ({spec.param_count},)"
        )
    if x.shape[-1] != spec.input_dim:
        raise ValueError(
            f"feature vector has length {x.shape[-1]}, expected {spec.input_dim}"
        )


def score(spec: ScorerSpec, w: np.ndarray, x: np.ndarray) -> float:
    """Scalar prediction score for one sample."""
    _check_dims(spec, w, x)
    if spec.kind == "linear":
        return float(np.dot(w, x))
    hidden_w, out_w = spec._split(w)
    return float(np.dot(out_w, np.tanh(hidden_w @ x)))


def score_many(spec: ScorerSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Scores for a batch of samples (rows of X). Returns shape (n,)."""
    _check_dims(spec, w, X)
    if spec.kind == "linear":
        return X @ w
    hidden_w, out_w = spec._split(w)
    return np.tanh(X @ hidden_w.T) @ out_w


def score_grad(spec: ScorerSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gradient of score with respect to w, length param_count."""
    _check_dims(spec, w, x)
    if spec.kind == "linear":
        return np.array(x, dtype=float, copy=True)
    hidden_w, out_w = spec._split(w)
    t = np.tanh(hidden_w @ x)
    # d/dW_hidden = outer(out_w * (1 - t^2), x); d/dw_out = t
    hidden_grad = np.outer(out_w * (1.0 - t * t), x)
    return np.concatenate([hidden_grad.ravel(), t])


def score_grad_many(spec: ScorerSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Per-sample score gradients, shape (n, param_count)."""
    _check_dims(spec, w, X)
    if spec.kind == "linear":
        return np.array(X, dtype=float, copy=True)
    hidden_w, out_w = spec._split(w)
    t = np.tanh(X @ hidden_w.T)  # (n, hidden)
    coeff = out_w * (1.0 - t * t)  # (n, hidden)
    hidden_grad = coeff[:, :, None] * X[:, None, :]  # (n, hidden, input)
    n = X.shape[0]
    return np.concatenate([hidden_grad.reshape(n, -1), t], axis=1)


def finite_diff_grad(
    fn: Callable[[np.ndarray], float], w: np.ndarray, step: float
) -> np.ndarray:
    """Central-difference gradient of fn at w, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    for i in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[i] += step
        wm[i] -= step
        out[i] = (fn(wp) - fn(wm)) / (2.0 * step)
    return out


def init_params(spec: ScorerSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw an initial parameter vector, scaled like 1/sqrt(fan_in)."""
    if spec.kind == "linear":
        return rng.standard_normal(spec.input_dim) / np.sqrt(spec.input_dim)
    h, d = spec.hidden_dim, spec.input_dim
    hidden = rng.standard_normal((h, d)) / np.sqrt(d)
    out = rng.standard_normal(h) / np.sqrt(h)
    return np.concatenate([hidden.ravel(), out])
