"""Pairwise losses, outer functions, and exact brute-force oracles.

The objective being optimized everywhere in this package is

    (1/|S1|) * sum_{z in S1} f( (1/|S2|) * sum_{z' in S2} loss(h(w,z), h(w,z')) )

with S1 the positive set, S2 the negative set, h the scorer, f the outer
function. ``exact_inner``, ``exact_objective`` and ``exact_grad`` evaluate
it (and its gradient) by exhaustive double loops over all pairs; they are
the ground truth the stochastic estimators are tested against.

Losses:

* ``psm_sigmoid``: 1 / (1 + exp(a - b)).  Symmetric: loss(a,b) + loss(b,a) = 1.
* ``kl_opauc``: exp(((b + 1 - a)_+)^2 / lambda), paired with the ``kl_log``
  outer f(s) = lambda * log(s) for partial-AUC surrogate optimization.
  Values are always >= 1.
* ``square``: (1 - (a - b))^2, the convex baseline.  The squared-hinge
  derivative of kl_opauc at its kink is 0 (both one-sided limits agree).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .model import ScorerSpec, score_grad_many, score_many

LOSS_KINDS = ("psm_sigmoid", "kl_opauc", "square")
OUTER_KINDS = ("identity", "kl_log")


@dataclass(frozen=True)
class PairwiseLossSpec:
    kind: str
    lam: float = 1.0  # kl_opauc only

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind: {self.kind!r}")
        if self.kind == "kl_opauc" and self.lam <= 0:
            raise ValueError("lambda must be positive for kl_opauc")


@dataclass(frozen=True)
class OuterFnSpec:
    kind: str
    lam: float = 1.0  # kl_log only
    u_floor: float = 1e-8  # kl_log only; clamp for f and f' near 0

    def __post_init__(self) -> None:
        if self.kind not in OUTER_KINDS:
            raise ValueError(f"unknown outer kind: {self.kind!r}")
        if self.kind == "kl_log" and (self.lam <= 0 or self.u_floor <= 0):
            raise ValueError("lambda and u_floor must be positive for kl_log")


IDENTITY_OUTER = OuterFnSpec("identity")


def loss(spec: PairwiseLossSpec, a, b):
    """Pairwise loss of a positive-side score a against negative-side b.

    Accepts scalars or broadcastable arrays.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if spec.kind == "psm_sigmoid":
        out = expit(b - a)  # 1/(1+exp(a-b)), saturating at the 0/1 limits
    elif spec.kind == "kl_opauc":
        m = np.maximum(b + 1.0 - a, 0.0)
        out = np.exp(m * m / spec.lam)
    else:  # square
        out = np.square(1.0 - (a - b))
    return float(out) if out.ndim == 0 else out


def loss_grads(spec: PairwiseLossSpec, a, b):
    """Partial derivatives (d loss/da, d loss/db). Scalars or arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if spec.kind == "psm_sigmoid":
        s = expit(b - a)
        da = -s * (1.0 - s)
        db = s * (1.0 - s)
    elif spec.kind == "kl_opauc":
        m = np.maximum(b + 1.0 - a, 0.0)
        common = np.exp(m * m / spec.lam) * (2.0 * m / spec.lam)
        da = -common
        db = common
    else:  # square
        t = 2.0 * (1.0 - (a - b))
        da = -t
        db = t
    if da.ndim == 0:
        return float(da), float(db)
    return da, db


def outer_value(spec: OuterFnSpec, s):
    """f(s): identity, or lambda * log(max(s, u_floor))."""
    s = np.asarray(s, dtype=float)
    if spec.kind == "identity":
        out = s
    else:
        out = spec.lam * np.log(np.maximum(s, spec.u_floor))
    return float(out) if out.ndim == 0 else out


def outer_deriv(spec: OuterFnSpec, s):
    """f'(s): 1, or lambda / max(s, u_floor)."""
    s = np.asarray(s, dtype=float)
    if spec.kind == "identity":
        out = np.ones_like(s)
    else:
        out = spec.lam / np.maximum(s, spec.u_floor)
    return float(out) if out.ndim == 0 else out


def _pair_scores(
    scorer: ScorerSpec, w: np.ndarray, pos_X: np.ndarray, neg_X: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    if pos_X.shape[0] == 0 or neg_X.shape[0] == 0:
        raise ValueError("positive and negative sets must both be nonempty")
    return score_many(scorer, w, pos_X), score_many(scorer, w, neg_X)


def exact_inner(
    loss_spec: PairwiseLossSpec,
    scorer: ScorerSpec,
    w: np.ndarray,
    x: np.ndarray,
    neg_X: np.ndarray,
) -> float:
    """Mean loss of one positive sample x against every negative row."""
    if neg_X.shape[0] == 0:
        raise ValueError("negative set must be nonempty")
    a = score_many(scorer, w, x[None, :])[0]
    b = score_many(scorer, w, neg_X)
    return float(np.mean(loss(loss_spec, a, b)))


def exact_inner_all(
    loss_spec: PairwiseLossSpec,
    scorer: ScorerSpec,
    w: np.ndarray,
    pos_X: np.ndarray,
    neg_X: np.ndarray,
) -> np.ndarray:
    """exact_inner for every positive row at once, shape (|S1|,)."""
    a, b = _pair_scores(scorer, w, pos_X, neg_X)
    return loss(loss_spec, a[:, None], b[None, :]).mean(axis=1)


def exact_objective(
    loss_spec: PairwiseLossSpec,
    outer: OuterFnSpec,
    scorer: ScorerSpec,
    w: np.ndarray,
    pos_X: np.ndarray,
    neg_X: np.ndarray,
) -> float:
    """Full objective by exhaustive summation, O(|S1|·|S2|) loss evals."""
    inner = exact_inner_all(loss_spec, scorer, w, pos_X, neg_X)
    return float(np.mean(outer_value(outer, inner)))


def exact_grad(
    loss_spec: PairwiseLossSpec,
    outer: OuterFnSpec,
    scorer: ScorerSpec,
    w: np.ndarray,
    pos_X: np.ndarray,
    neg_X: np.ndarray,
) -> np.ndarray:
    """Analytic full gradient over all (positive, negative) pairs.

    (1/(PQ)) * sum_{p,q} f'(g_p) * [d1loss_pq * grad h(z_p) + d2loss_pq * grad h(z'_q)]

    This is the ground-truth oracle the stochastic estimators are tested
    against.
    """
    a, b = _pair_scores(scorer, w, pos_X, neg_X)
    P, Q = a.shape[0], b.shape[0]
    lmat = loss(loss_spec, a[:, None], b[None, :])
    fprime = outer_deriv(outer, lmat.mean(axis=1))  # f'(g_p), shape (P,)
    d1, d2 = loss_grads(loss_spec, a[:, None], b[None, :])
    pos_J = score_grad_many(scorer, w, pos_X)  # (P, d)
    neg_J = score_grad_many(scorer, w, neg_X)  # (Q, d)
    pos_w = fprime * d1.sum(axis=1)  # (P,)
    neg_w = fprime @ d2  # (Q,)
    return (pos_w @ pos_J + neg_w @ neg_J) / (P * Q)
