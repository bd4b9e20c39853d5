"""Seeded synthetic Gaussian-mixture dumps with a matching Bayes-optimal head.

Class centroids sit at centroid_scale from the origin (mutually orthogonal
whenever the class count fits the dimension), features add isotropic Gaussian
noise, and the head is the Bayes classifier for that mixture. Feature, weight
and logit matrices pass through binary32 so a write/read round-trip is
bit-exact.
"""
from __future__ import annotations

import numpy as np

from .eds import EmbeddingSet, ModelHead


def _f32(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


def _centroids(classes: int, dim: int, scale: float, rng) -> np.ndarray:
    if classes <= dim:
        gauss = rng.standard_normal((dim, classes))
        q, r = np.linalg.qr(gauss)
        q = q * np.sign(np.diag(r))  # fix the sign ambiguity deterministically
        return scale * q.T
    gauss = rng.standard_normal((classes, dim))
    norms = np.linalg.norm(gauss, axis=1, keepdims=True)
    return scale * gauss / norms


def generate_synthetic(
    classes: int,
    dim: int,
    per_class: int,
    centroid_scale: float = 10.0,
    noise_scale: float = 1.0,
    seed: int = 0,
) -> tuple[EmbeddingSet, ModelHead]:
    """Draw a labeled mixture sample and its Bayes head, deterministically."""
    if classes < 2:
        raise ValueError("need at least two classes")
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    if per_class < 1:
        raise ValueError("per-class count must be >= 1")
    if centroid_scale <= 0 or noise_scale <= 0:
        raise ValueError("scales must be positive")

    rng = np.random.default_rng(seed)
    centroids = _centroids(classes, dim, centroid_scale, rng)

    labels = np.repeat(np.arange(classes, dtype=np.int32), per_class)
    n = labels.shape[0]
    noise = noise_scale * rng.standard_normal((n, dim))
    features = _f32(centroids[labels] + noise)

    # Bayes rule for equal-prior isotropic Gaussians:
    # argmax_k  mu_k . x / sigma^2  -  |mu_k|^2 / (2 sigma^2)
    var = noise_scale**2
    weight = _f32(centroids / var)
    bias = _f32(-0.5 * np.sum(centroids**2, axis=1) / var)
    logits = _f32(features @ weight.T + bias)

    embedding_set = EmbeddingSet(features=features, logits=logits, labels=labels)
    head = ModelHead(weight=weight, bias=bias)
    return embedding_set, head
