"""Post-hoc OOD detectors over penultimate features and logits.

Every detector follows fit(train, [head]) -> DetectorState -> score(batch),
and every score is oriented so that HIGHER means MORE out-of-distribution
(confidence-like quantities are negated). Fitted states serialize to a tagged
binary container and deserialize losslessly.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, xlogy

from .eds import (
    BadMagicError,
    EmbeddingSet,
    FormatError,
    HeaderFieldError,
    ModelHead,
    PayloadError,
    Sink,
    Source,
    _Cursor,
    _read_all,
    _write_all,
)

STATE_MAGIC = b"OODSTA01"

KLM_FLOOR = 1e-12
COV_REG = 1e-6
HEAD_MISMATCH_TOL = 1e-3
_KNN_BLOCK = 1024


class DetectorKind(str, Enum):
    MSP = "msp"
    MAHA = "maha"
    REACT_ENERGY = "react_energy"
    GRADNORM = "gradnorm"
    MLS = "mls"
    KLM = "klm"
    KNN = "knn"
    VIM = "vim"
    GEN = "gen"


_KIND_ORDER = tuple(DetectorKind)
NEEDS_HEAD = frozenset({DetectorKind.REACT_ENERGY, DetectorKind.VIM})
NEEDS_LABELS = frozenset({DetectorKind.MAHA, DetectorKind.KLM})


class HeadMismatchWarning(UserWarning):
    """Stored logits disagree with recomputed W @ f + b beyond tolerance."""


@dataclass(frozen=True)
class DetectorConfig:
    """Hyperparameters; None means derive the default from the train set."""

    kind: DetectorKind
    react_q: float = 98.0
    knn_k: int | None = None
    vim_dim: int | None = None
    gen_gamma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "kind", DetectorKind(self.kind))
        if not 0.0 < self.react_q <= 100.0:
            raise ValueError("react_q must be in (0, 100]")
        if self.knn_k is not None and self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.vim_dim is not None and self.vim_dim < 1:
            raise ValueError("vim_dim must be >= 1")
        if not 0.0 < self.gen_gamma < 1.0:
            raise ValueError("gen_gamma must be in (0, 1)")


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax along the last axis, in float64."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim < 1 or z.shape[-1] < 1:
        raise ValueError("softmax needs at least one logit")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite entries")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _frozen(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, order="C", copy=True)
    out.flags.writeable = False
    return out


def _arrays_equal(a, b) -> bool:
    return a.shape == b.shape and np.array_equal(a, b)


@dataclass(frozen=True, eq=False)
class MahaState:
    """Per-class means and the Cholesky factor of the regularized tied covariance."""

    class_ids: np.ndarray  # (k,) int32, sorted ascending
    means: np.ndarray      # (k, d)
    chol: np.ndarray       # (d, d) lower triangular, positive diagonal

    def __post_init__(self):
        ids = _frozen(self.class_ids, np.int32)
        means = _frozen(self.means)
        chol = _frozen(self.chol)
        if ids.ndim != 1 or means.ndim != 2 or chol.ndim != 2:
            raise ValueError("malformed Mahalanobis state")
        if means.shape[0] != ids.shape[0]:
            raise ValueError("one mean row per class id required")
        d = means.shape[1]
        if chol.shape != (d, d):
            raise ValueError("Cholesky factor shape must match feature dim")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(chol))):
            raise ValueError("non-finite Mahalanobis state")
        if np.any(np.diag(chol) <= 0):
            raise ValueError("Cholesky factor must have positive diagonal")
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "chol", chol)

    def __eq__(self, other):
        if not isinstance(other, MahaState):
            return NotImplemented
        return (
            _arrays_equal(self.class_ids, other.class_ids)
            and _arrays_equal(self.means, other.means)
            and _arrays_equal(self.chol, other.chol)
        )


@dataclass(frozen=True, eq=False)
class ReactState:
    """Global activation clamp threshold plus the head used for energy."""

    tau: float
    head: ModelHead

    def __post_init__(self):
        if not np.isfinite(self.tau):
            raise ValueError("tau must be finite")

    def __eq__(self, other):
        if not isinstance(other, ReactState):
            return NotImplemented
        return self.tau == other.tau and self.head == other.head


@dataclass(frozen=True, eq=False)
class KlmState:
    """Mean softmax template per predicted class; rows on the simplex."""

    templates: np.ndarray  # (c, c)

    def __post_init__(self):
        t = _frozen(self.templates)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError("templates must be square (one row per class)")
        if not np.all(np.isfinite(t)) or np.any(t < 0):
            raise ValueError("templates must be finite and non-negative")
        if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each template must sum to 1 within 1e-9")
        object.__setattr__(self, "templates", t)

    def __eq__(self, other):
        if not isinstance(other, KlmState):
            return NotImplemented
        return _arrays_equal(self.templates, other.templates)


@dataclass(frozen=True, eq=False)
class KnnState:
    """L2-normalized train feature bank and the neighbor rank k."""

    bank: np.ndarray  # (n, d), unit rows
    k: int

    def __post_init__(self):
        bank = _frozen(self.bank)
        if bank.ndim != 2:
            raise ValueError("bank must be 2-D")
        if not np.all(np.isfinite(bank)):
            raise ValueError("bank contains non-finite entries")
        norms = np.linalg.norm(bank, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("bank rows must be unit norm within 1e-9")
        if not 1 <= self.k <= bank.shape[0]:
            raise ValueError("k must satisfy 1 <= k <= bank rows")
        object.__setattr__(self, "bank", bank)

    def __eq__(self, other):
        if not isinstance(other, KnnState):
            return NotImplemented
        return self.k == other.k and _arrays_equal(self.bank, other.bank)


@dataclass(frozen=True, eq=False)
class VimState:
    """Residual subspace against the principal span of the shifted features."""

    offset: np.ndarray  # (d,)
    basis: np.ndarray   # (d, d - D), orthonormal columns
    alpha: float
    head: ModelHead

    def __post_init__(self):
        offset = _frozen(self.offset)
        basis = _frozen(self.basis)
        if offset.ndim != 1 or basis.ndim != 2:
            raise ValueError("malformed residual subspace state")
        if basis.shape[0] != offset.shape[0]:
            raise ValueError("basis rows must match feature dim")
        if not 1 <= basis.shape[1] <= basis.shape[0]:
            raise ValueError("basis column count out of range")
        if not (np.all(np.isfinite(offset)) and np.all(np.isfinite(basis))):
            raise ValueError("non-finite residual subspace state")
        gram = basis.T @ basis
        if np.max(np.abs(gram - np.eye(basis.shape[1]))) > 1e-9:
            raise ValueError("basis columns must be orthonormal within 1e-9")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError("alpha must be a positive finite scalar")
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "basis", basis)

    def __eq__(self, other):
        if not isinstance(other, VimState):
            return NotImplemented
        return (
            self.alpha == other.alpha
            and _arrays_equal(self.offset, other.offset)
            and _arrays_equal(self.basis, other.basis)
            and self.head == other.head
        )


Payload = MahaState | ReactState | KlmState | KnnState | VimState | None


@dataclass(frozen=True, eq=False)
class DetectorState:
    """Everything score() needs: kind, resolved config, dims, fitted payload."""

    kind: DetectorKind
    dim: int
    n_classes: int
    config: DetectorConfig
    payload: Payload

    def __post_init__(self):
        if self.dim < 1 or self.n_classes < 2:
            raise ValueError("state dims out of range")
        if self.config.kind != self.kind:
            raise ValueError("config kind does not match state kind")

    def __eq__(self, other):
        if not isinstance(other, DetectorState):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.dim == other.dim
            and self.n_classes == other.n_classes
            and self.config == other.config
            and self.payload == other.payload
        )


def check_head_consistency(train: EmbeddingSet, head: ModelHead) -> float:
    """Warn (but proceed) when stored logits drift from W @ f + b."""
    recomputed = head.logits(train.features)
    drift = float(np.max(np.abs(recomputed - train.logits)))
    if drift > HEAD_MISMATCH_TOL:
        warnings.warn(
            f"stored logits differ from head by {drift:.3e} (max abs), "
            f"tolerance {HEAD_MISMATCH_TOL:.0e}",
            HeadMismatchWarning,
            stacklevel=2,
        )
    return drift


def _fit_maha(train: EmbeddingSet) -> MahaState:
    feats = train.features
    labels = train.labels
    n, d = feats.shape
    class_ids = np.unique(labels)
    means = np.empty((class_ids.shape[0], d))
    sigma = np.zeros((d, d))
    for j, cid in enumerate(class_ids):
        block = feats[labels == cid]
        means[j] = block.mean(axis=0)
        centered = block - means[j]
        sigma += centered.T @ centered
    sigma /= n
    sigma += (COV_REG * np.trace(sigma) / d) * np.eye(d)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "tied covariance is not positive definite after regularization"
        ) from exc
    return MahaState(class_ids=class_ids, means=means, chol=chol)


def _fit_react(train: EmbeddingSet, head: ModelHead, q: float) -> ReactState:
    tau = float(np.percentile(train.features, q))
    return ReactState(tau=tau, head=head)


def _fit_klm(train: EmbeddingSet) -> KlmState:
    probs = softmax(train.logits)
    preds = train.predictions()
    c = train.c
    templates = np.empty((c, c))
    for k in range(c):
        mask = preds == k
        if mask.any():
            templates[k] = probs[mask].mean(axis=0)
        else:
            # never-predicted class: degenerate one-hot template
            templates[k] = np.eye(c)[k]
    return KlmState(templates=templates)


def _normalized_rows(feats: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError(f"{what} contains a zero-norm feature row")
    return feats / norms


def _fit_knn(train: EmbeddingSet, k: int | None) -> KnnState:
    bank = _normalized_rows(train.features, "train set")
    n = bank.shape[0]
    if k is None:
        k = min(max(1, round(2.5 * train.c)), n)
    elif k > n:
        raise ValueError(f"knn_k={k} exceeds the {n}-row bank")
    return KnnState(bank=bank, k=k)


def resolve_vim_dim(d: int, requested: int | None) -> int:
    """Principal-subspace size: round(d/2) by default, clamped to [1, d-1]."""
    if d < 2:
        raise ValueError("residual scoring needs feature dimension >= 2")
    dim = round(d / 2) if requested is None else requested
    return min(max(dim, 1), d - 1)


def _fit_vim(train: EmbeddingSet, head: ModelHead, requested: int | None) -> VimState:
    feats = train.features
    n, d = feats.shape
    principal = resolve_vim_dim(d, requested)
    offset = -np.linalg.pinv(head.weight) @ head.bias
    shifted = feats - offset
    moment = shifted.T @ shifted / n  # uncentered second moment about the offset
    eigvals, eigvecs = np.linalg.eigh(moment)  # ascending order
    basis = eigvecs[:, : d - principal]
    residual = np.linalg.norm(shifted @ basis, axis=1)
    denom = residual.sum()
    if denom <= 0.0:
        raise ValueError("train features have zero residual outside the subspace")
    recomputed = head.logits(feats)
    alpha = float(recomputed.max(axis=1).sum() / denom)
    if not (np.isfinite(alpha) and alpha > 0):
        raise ValueError("virtual-logit scale alpha must be positive")
    return VimState(offset=offset, basis=basis, alpha=alpha, head=head)


def fit(
    detector: DetectorKind | DetectorConfig | str,
    train: EmbeddingSet,
    head: ModelHead | None = None,
) -> DetectorState:
    """Fit one detector on an ID train set; returns its frozen state."""
    if isinstance(detector, DetectorConfig):
        config = detector
    else:
        config = DetectorConfig(kind=DetectorKind(detector))
    kind = config.kind

    if kind in NEEDS_HEAD:
        if head is None:
            raise ValueError(f"{kind.value} requires head weights")
        if head.d != train.d or head.c != train.c:
            raise ValueError(
                f"head shape ({head.c}, {head.d}) does not match "
                f"train set (c={train.c}, d={train.d})"
            )
        check_head_consistency(train, head)
    if kind in NEEDS_LABELS and train.labels is None:
        raise ValueError(f"{kind.value} requires a labeled train set")

    payload: Payload = None
    if kind is DetectorKind.MAHA:
        payload = _fit_maha(train)
    elif kind is DetectorKind.REACT_ENERGY:
        payload = _fit_react(train, head, config.react_q)
    elif kind is DetectorKind.KLM:
        payload = _fit_klm(train)
    elif kind is DetectorKind.KNN:
        payload = _fit_knn(train, config.knn_k)
        config = replace(config, knn_k=payload.k)
    elif kind is DetectorKind.VIM:
        payload = _fit_vim(train, head, config.vim_dim)
        config = replace(config, vim_dim=train.d - payload.basis.shape[1])

    return DetectorState(
        kind=kind, dim=train.d, n_classes=train.c, config=config, payload=payload
    )


def _score_maha(state: MahaState, feats: np.ndarray) -> np.ndarray:
    out = np.full(feats.shape[0], np.inf)
    for j in range(state.means.shape[0]):
        diff = feats - state.means[j]
        z = solve_triangular(state.chol, diff.T, lower=True)
        np.minimum(out, np.sum(z * z, axis=0), out=out)
    return out


def _score_knn(state: KnnState, feats: np.ndarray) -> np.ndarray:
    queries = _normalized_rows(feats, "batch")
    bank = state.bank
    bank_sq = np.sum(bank * bank, axis=1)
    out = np.empty(queries.shape[0])
    for start in range(0, queries.shape[0], _KNN_BLOCK):
        block = queries[start:start + _KNN_BLOCK]
        d2 = np.sum(block * block, axis=1)[:, None] + bank_sq - 2.0 * (block @ bank.T)
        np.clip(d2, 0.0, None, out=d2)
        kth = np.partition(d2, state.k - 1, axis=1)[:, state.k - 1]
        out[start:start + _KNN_BLOCK] = np.sqrt(kth)
    return out


def _score_klm(state: KlmState, probs: np.ndarray) -> np.ndarray:
    log_templates = np.log(np.maximum(state.templates, KLM_FLOOR))
    self_term = xlogy(probs, probs).sum(axis=1)  # 0 log 0 = 0
    return self_term - (probs @ log_templates.T).max(axis=1)


def score(state: DetectorState, batch: EmbeddingSet) -> np.ndarray:
    """Score a batch; one float64 per row, higher = more OOD."""
    if batch.d != state.dim or batch.c != state.n_classes:
        raise ValueError(
            f"batch (d={batch.d}, c={batch.c}) does not match "
            f"state (d={state.dim}, c={state.n_classes})"
        )
    kind = state.kind
    if kind is DetectorKind.MSP:
        return -softmax(batch.logits).max(axis=1)
    if kind is DetectorKind.MLS:
        return -batch.logits.max(axis=1)
    if kind is DetectorKind.GEN:
        probs = softmax(batch.logits)
        gamma = state.config.gen_gamma
        return np.sum(probs**gamma * (1.0 - probs)**gamma, axis=1)
    if kind is DetectorKind.GRADNORM:
        probs = softmax(batch.logits)
        mean_dev = np.abs(probs - 1.0 / batch.c).sum(axis=1)
        return -(mean_dev * np.abs(batch.features).sum(axis=1))
    if kind is DetectorKind.MAHA:
        return _score_maha(state.payload, batch.features)
    if kind is DetectorKind.REACT_ENERGY:
        st: ReactState = state.payload
        clamped = np.minimum(batch.features, st.tau)
        return -logsumexp(st.head.logits(clamped), axis=1)
    if kind is DetectorKind.KLM:
        return _score_klm(state.payload, softmax(batch.logits))
    if kind is DetectorKind.KNN:
        return _score_knn(state.payload, batch.features)
    if kind is DetectorKind.VIM:
        vs: VimState = state.payload
        residual = np.linalg.norm((batch.features - vs.offset) @ vs.basis, axis=1)
        energy = logsumexp(vs.head.logits(batch.features), axis=1)
        return vs.alpha * residual - energy
    raise ValueError(f"unknown detector kind {kind!r}")


# --- state container ---------------------------------------------------------
# Layout (little-endian): magic, u32 kind tag, u32 d, u32 c,
# f64 react_q, f64 gen_gamma, u32 knn_k (0 = unset), u32 vim_dim (0 = unset),
# then a kind-specific payload. Matrices are float64 row-major so that fitted
# statistics round-trip losslessly.


def _f64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_state(state: DetectorState, sink: Sink) -> int:
    """Serialize a DetectorState; returns the byte count written."""
    cfg = state.config
    parts = [
        STATE_MAGIC,
        struct.pack(
            "<IIIddII",
            _KIND_ORDER.index(state.kind),
            state.dim,
            state.n_classes,
            cfg.react_q,
            cfg.gen_gamma,
            cfg.knn_k or 0,
            cfg.vim_dim or 0,
        ),
    ]
    p = state.payload
    if state.kind is DetectorKind.MAHA:
        parts.append(struct.pack("<I", p.class_ids.shape[0]))
        parts.append(np.ascontiguousarray(p.class_ids, dtype="<i4").tobytes())
        parts.append(_f64_bytes(p.means))
        parts.append(_f64_bytes(p.chol))
    elif state.kind is DetectorKind.REACT_ENERGY:
        parts.append(struct.pack("<d", p.tau))
        parts.append(_f64_bytes(p.head.weight))
        parts.append(_f64_bytes(p.head.bias))
    elif state.kind is DetectorKind.KLM:
        parts.append(_f64_bytes(p.templates))
    elif state.kind is DetectorKind.KNN:
        parts.append(struct.pack("<I", p.bank.shape[0]))
        parts.append(_f64_bytes(p.bank))
    elif state.kind is DetectorKind.VIM:
        parts.append(struct.pack("<Id", p.basis.shape[1], p.alpha))
        parts.append(_f64_bytes(p.offset))
        parts.append(_f64_bytes(p.basis))
        parts.append(_f64_bytes(p.head.weight))
        parts.append(_f64_bytes(p.head.bias))
    return _write_all(sink, b"".join(parts))


def load_state(source: Source) -> DetectorState:
    """Parse a DetectorState, raising a FormatError subclass on any defect."""
    data = _read_all(source)
    cur = _Cursor(data)
    magic = cur.take(8)
    if magic != STATE_MAGIC:
        raise BadMagicError(f"expected {STATE_MAGIC!r}, got {magic!r}")
    tag, dim, n_classes, react_q, gen_gamma, knn_k, vim_dim = struct.unpack(
        "<IIIddII", cur.take(36)
    )
    if tag >= len(_KIND_ORDER):
        raise HeaderFieldError(f"unknown detector tag {tag}")
    kind = _KIND_ORDER[tag]
    if dim < 1 or n_classes < 2:
        raise HeaderFieldError("state dims out of range")

    def build():
        config = DetectorConfig(
            kind=kind,
            react_q=react_q,
            knn_k=knn_k or None,
            vim_dim=vim_dim or None,
            gen_gamma=gen_gamma,
        )
        payload: Payload = None
        if kind is DetectorKind.MAHA:
            n_ids = cur.u32()
            if n_ids < 1:
                raise ValueError("need at least one class")
            ids = cur.array("<i4", n_ids)
            means = cur.array("<f8", n_ids * dim).reshape(n_ids, dim)
            chol = cur.array("<f8", dim * dim).reshape(dim, dim)
            payload = MahaState(class_ids=ids, means=means, chol=chol)
        elif kind is DetectorKind.REACT_ENERGY:
            tau = cur.f64()
            weight = cur.array("<f8", n_classes * dim).reshape(n_classes, dim)
            bias = cur.array("<f8", n_classes)
            payload = ReactState(tau=tau, head=ModelHead(weight=weight, bias=bias))
        elif kind is DetectorKind.KLM:
            templates = cur.array("<f8", n_classes * n_classes)
            payload = KlmState(templates=templates.reshape(n_classes, n_classes))
        elif kind is DetectorKind.KNN:
            rows = cur.u32()
            if rows < 1:
                raise ValueError("empty feature bank")
            bank = cur.array("<f8", rows * dim).reshape(rows, dim)
            payload = KnnState(bank=bank, k=config.knn_k or 0)
        elif kind is DetectorKind.VIM:
            rdim, alpha = struct.unpack("<Id", cur.take(12))
            if not 1 <= rdim <= dim - 1:
                raise ValueError("residual dimension out of range")
            offset = cur.array("<f8", dim)
            basis = cur.array("<f8", dim * rdim).reshape(dim, rdim)
            weight = cur.array("<f8", n_classes * dim).reshape(n_classes, dim)
            bias = cur.array("<f8", n_classes)
            payload = VimState(
                offset=offset,
                basis=basis,
                alpha=alpha,
                head=ModelHead(weight=weight, bias=bias),
            )
        return DetectorState(
            kind=kind, dim=dim, n_classes=n_classes, config=config, payload=payload
        )

    try:
        # untrusted payloads may overflow during validation; stay silent
        with np.errstate(all="ignore"):
            state = build()
    except FormatError:
        raise
    except ValueError as exc:
        raise PayloadError(str(exc)) from exc
    cur.finish()
    return state
