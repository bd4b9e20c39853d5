"""Threshold-free evaluation metrics: AUROC, rejection curves, PRR, accuracy.

AUROC uses the rank-sum (Mann-Whitney) estimator with midranks for ties, so
any strictly increasing transform of the scores leaves the value bit-identical.
PRR areas are evaluated in exact integer arithmetic over the trapezoid sums,
so the oracle ordering scores exactly 100 and the anti-oracle exactly -100.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIE_DIAGNOSTIC_THRESHOLD = 0.01
TIE_DIAGNOSTIC_ROUNDS = 10


class DegenerateMetricError(ValueError):
    """Metric undefined for this input (single-class, all-correct, ...)."""


@dataclass(frozen=True)
class ScoredBinarySample:
    """One scored sample with its binary ground truth."""

    score: float
    positive: bool


def _as_scores(scores) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("scores must be 1-D")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores contain non-finite entries")
    return arr


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties averaged over their positions."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    n = values.shape[0]
    boundary = np.empty(n, dtype=bool)
    boundary[0] = True
    boundary[1:] = sorted_vals[1:] != sorted_vals[:-1]
    group = np.cumsum(boundary) - 1
    counts = np.bincount(group)
    ends = np.cumsum(counts)
    starts = ends - counts
    mid = (starts + ends + 1) / 2.0  # mean of ranks start+1 .. end
    ranks = np.empty(n)
    ranks[order] = mid[group]
    return ranks


def auroc(scores, positives) -> float:
    """P(score_pos > score_neg) + 0.5 P(equal), via midranked rank sums."""
    arr = _as_scores(scores)
    pos = np.asarray(positives, dtype=bool)
    if pos.shape != arr.shape:
        raise ValueError("scores and positives must align")
    n_pos = int(pos.sum())
    n_neg = arr.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateMetricError("need both positive and negative samples")
    ranks = _midranks(arr)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_from_samples(samples) -> float:
    """AUROC over a sequence of ScoredBinarySample."""
    return auroc(
        [s.score for s in samples],
        [s.positive for s in samples],
    )


@dataclass(frozen=True, eq=False)
class RejectionCurve:
    """Error rate after rejecting the j highest-scored samples, j = 0..N.

    Rejected samples count as handled correctly; errors are divided by the
    full N throughout, so the curve starts at the base error and ends at 0.
    """

    fractions: np.ndarray  # (N+1,) = j / N
    errors: np.ndarray     # (N+1,)

    @property
    def base_error(self) -> float:
        return float(self.errors[0])

    def baseline(self) -> np.ndarray:
        """Random-rejection reference: straight line from base error to 0."""
        return self.base_error * (1.0 - self.fractions)


def _rejection_error_counts(scores: np.ndarray, correct: np.ndarray) -> np.ndarray:
    """Remaining error count after each rejection step, ints, length N+1."""
    order = np.argsort(-scores, kind="stable")  # descending, stable in input order
    mistakes = (~correct)[order].astype(np.int64)
    total = mistakes.sum()
    remaining = np.empty(scores.shape[0] + 1, dtype=np.int64)
    remaining[0] = total
    remaining[1:] = total - np.cumsum(mistakes)
    return remaining


def rejection_curve(scores, correct) -> RejectionCurve:
    arr = _as_scores(scores)
    ok = np.asarray(correct, dtype=bool)
    if ok.shape != arr.shape:
        raise ValueError("scores and correct must align")
    n = arr.shape[0]
    remaining = _rejection_error_counts(arr, ok)
    return RejectionCurve(
        fractions=np.arange(n + 1) / n,
        errors=remaining / n,
    )


@dataclass(frozen=True)
class PrrResult:
    """Headline value plus a tie diagnostic.

    tie_fraction is the share of samples whose score value is not unique.
    tie_randomized is the mean PRR over shuffled orderings, present only when
    tie_fraction exceeds 1%; otherwise None.
    """

    value: float
    tie_fraction: float
    tie_randomized: float | None


def _prr_value(scores: np.ndarray, correct: np.ndarray) -> float:
    # Rejecting by descending score, the area between the random-rejection
    # baseline and the curve is (E(N+1) - 2 sum_j err_j) / (2 N^2); the oracle
    # area substitutes sum_j err_j = E(E+1)/2. The N^2 factors cancel, leaving
    # an exact integer ratio.
    n = scores.shape[0]
    errors = int(n - correct.sum())
    remaining = _rejection_error_counts(scores, correct)
    numerator = errors * (n + 1) - 2 * int(remaining.sum())
    denominator = errors * (n - errors)
    return 100.0 * numerator / denominator


def prr(scores, correct) -> float:
    """Prediction rejection ratio, percent of the oracle's area."""
    return prr_detailed(scores, correct).value


def prr_detailed(scores, correct) -> PrrResult:
    """PRR plus tie diagnostics; raises DegenerateMetricError when undefined."""
    arr = _as_scores(scores)
    ok = np.asarray(correct, dtype=bool)
    if ok.shape != arr.shape:
        raise ValueError("scores and correct must align")
    n = arr.shape[0]
    errors = int(n - ok.sum())
    if n < 2 or errors == 0 or errors == n:
        raise DegenerateMetricError(
            f"PRR undefined for n={n} with {errors} errors"
        )
    value = _prr_value(arr, ok)

    _, counts = np.unique(arr, return_counts=True)
    tie_fraction = float(counts[counts > 1].sum() / n)
    tie_randomized = None
    if tie_fraction > TIE_DIAGNOSTIC_THRESHOLD:
        acc = 0.0
        for round_seed in range(TIE_DIAGNOSTIC_ROUNDS):
            perm = np.random.default_rng(round_seed).permutation(n)
            acc += _prr_value(arr[perm], ok[perm])
        tie_randomized = acc / TIE_DIAGNOSTIC_ROUNDS
    return PrrResult(
        value=value, tie_fraction=tie_fraction, tie_randomized=tie_randomized
    )


def balanced_accuracy(predictions, labels) -> float:
    """Mean per-class recall, in percent; classes are those present in labels."""
    preds = np.asarray(predictions)
    lab = np.asarray(labels)
    if preds.shape != lab.shape or preds.ndim != 1 or preds.shape[0] == 0:
        raise ValueError("predictions and labels must be aligned, non-empty 1-D")
    recalls = [
        np.mean(preds[lab == cls] == cls) for cls in np.unique(lab)
    ]
    return float(100.0 * np.mean(recalls))
