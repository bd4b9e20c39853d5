"""Deep-ensemble prediction and uncertainty decomposition.

Members are stacked softmax outputs (M, N, c). Total uncertainty is the
Shannon entropy (natural log) of the member-averaged distribution; epistemic
uncertainty is the mutual information between prediction and member index,
i.e. total minus the mean member entropy. Both are usable as OOD scores
directly: higher = more uncertain = more OOD.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import xlogy

from .eds import EmbeddingSet
from .detectors import softmax

PROB_TOL = 1e-9


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis; 0 log 0 = 0."""
    return -xlogy(probs, probs).sum(axis=-1)


@dataclass(frozen=True, eq=False)
class EnsembleBatch:
    """Member softmax stack of shape (M, N, c); rows on the simplex."""

    member_probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.member_probs, dtype=np.float64, order="C", copy=True)
        if probs.ndim != 3:
            raise ValueError("member_probs must have shape (M, N, c)")
        m, n, c = probs.shape
        if m < 1 or n < 1 or c < 2:
            raise ValueError("need M >= 1 members, N >= 1 samples, c >= 2 classes")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if np.any(np.abs(probs.sum(axis=-1) - 1.0) > PROB_TOL):
            raise ValueError(f"member rows must sum to 1 within {PROB_TOL}")
        probs.flags.writeable = False
        object.__setattr__(self, "member_probs", probs)

    @property
    def n_members(self) -> int:
        return self.member_probs.shape[0]

    @property
    def n(self) -> int:
        return self.member_probs.shape[1]

    @property
    def c(self) -> int:
        return self.member_probs.shape[2]

    @classmethod
    def from_logits(cls, logit_stack) -> "EnsembleBatch":
        """Stack of member logits (M, N, c) -> softmax members."""
        stack = np.asarray(logit_stack, dtype=np.float64)
        if stack.ndim != 3:
            raise ValueError("logit stack must have shape (M, N, c)")
        return cls(member_probs=softmax(stack))

    @classmethod
    def from_sets(cls, members: Sequence[EmbeddingSet]) -> "EnsembleBatch":
        """Member dumps -> softmax stack; all must share (n, c)."""
        if len(members) < 1:
            raise ValueError("need at least one member")
        shapes = {(m.n, m.c) for m in members}
        if len(shapes) != 1:
            raise ValueError(f"members disagree on (n, c): {sorted(shapes)}")
        return cls.from_logits(np.stack([m.logits for m in members]))

    def mean_probs(self) -> np.ndarray:
        """Member-averaged predictive distribution, (N, c)."""
        return self.member_probs.mean(axis=0)

    def predictions(self) -> np.ndarray:
        """Argmax of the averaged distribution; ties to the lowest index."""
        return np.argmax(self.mean_probs(), axis=1)


def total_uncertainty(batch: EnsembleBatch) -> np.ndarray:
    """Entropy of the averaged distribution, in [0, ln c]."""
    return entropy(batch.mean_probs())


def epistemic_uncertainty(batch: EnsembleBatch) -> np.ndarray:
    """Mutual information: total minus mean member entropy, clamped at 0.

    Jensen's inequality bounds it in [0, total]; tiny negative rounding
    residue is snapped to exactly 0. With one member it is identically 0.
    """
    tu = total_uncertainty(batch)
    mean_member_entropy = entropy(batch.member_probs).mean(axis=0)
    return np.maximum(tu - mean_member_entropy, 0.0)
