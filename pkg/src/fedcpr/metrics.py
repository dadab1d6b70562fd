"""AUC and one-way partial AUC with exact tie handling.

Ties count 0.5 everywhere (Wilcoxon convention). ``auc`` is a sorted
rank-based implementation; ``auc_bruteforce`` is the O(P·Q) pairwise
definition it is verified against; keep both, they are independent routes
to the same number.

``partial_auc`` restricts the comparison to the hardest (highest-scoring)
floor(fpr_max·Q) negatives and reports the pairwise win rate of positives
against exactly those negatives, so partial_auc(fpr_max=1) == auc.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ScoredEval:
    pos_scores: np.ndarray
    neg_scores: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "pos_scores", np.asarray(self.pos_scores, dtype=float))
        object.__setattr__(self, "neg_scores", np.asarray(self.neg_scores, dtype=float))


def _check_nonempty(ev: ScoredEval) -> None:
    if ev.pos_scores.size == 0 or ev.neg_scores.size == 0:
        raise ValueError("both score sides must be nonempty")


def auc(ev: ScoredEval) -> float:
    """Probability a positive outranks a negative, ties counting 0.5."""
    _check_nonempty(ev)
    p, q = ev.pos_scores.size, ev.neg_scores.size
    ranks = rankdata(np.concatenate([ev.pos_scores, ev.neg_scores]), method="average")
    pos_rank_sum = ranks[:p].sum()
    return float((pos_rank_sum - p * (p + 1) / 2.0) / (p * q))


def auc_bruteforce(ev: ScoredEval) -> float:
    """Literal pairwise definition; the oracle for the sorted route."""
    _check_nonempty(ev)
    wins = 0.0
    for s in ev.pos_scores:
        for t in ev.neg_scores:
            if s > t:
                wins += 1.0
            elif s == t:
                wins += 0.5
    return wins / (ev.pos_scores.size * ev.neg_scores.size)


def _hardest_negatives(neg_scores: np.ndarray, fpr_max: float) -> np.ndarray:
    if not (0.0 < fpr_max <= 1.0):
        raise ValueError("fpr_max must be in (0, 1]")
    q = neg_scores.size
    keep = int(np.floor(fpr_max * q))
    if keep == 0:
        raise ValueError(f"fpr_max={fpr_max} keeps zero of {q} negatives")
    # Ties at the quantile boundary break by score then by position index.
    order = np.lexsort((np.arange(q), -neg_scores))
    return neg_scores[order[:keep]]


def partial_auc(ev: ScoredEval, fpr_max: float) -> float:
    """One-way partial AUC against the hardest fpr_max fraction of negatives."""
    _check_nonempty(ev)
    return auc(ScoredEval(ev.pos_scores, _hardest_negatives(ev.neg_scores, fpr_max)))


def partial_auc_bruteforce(ev: ScoredEval, fpr_max: float) -> float:
    """O(P·Q) route for partial_auc, restricted the same way."""
    _check_nonempty(ev)
    return auc_bruteforce(
        ScoredEval(ev.pos_scores, _hardest_negatives(ev.neg_scores, fpr_max))
    )
