"""Embedding dump containers and their binary wire formats.

On disk every matrix is IEEE-754 binary32, row-major, little-endian; integer
fields are little-endian and labels/groups are int32. In memory everything is
float64. Readers validate header fields and compute the expected stream length
before touching the payload, so arbitrary bytes fail with a typed error and
bounded memory.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

EDS_MAGIC = b"OODEDS01"
HEAD_MAGIC = b"OODHEAD1"

FLAG_LABELS = 0x01
FLAG_GROUPS = 0x02
_KNOWN_FLAGS = FLAG_LABELS | FLAG_GROUPS

Source = Union[str, Path, bytes, BinaryIO]
Sink = Union[str, Path, BinaryIO]


class FormatError(ValueError):
    """Base class for malformed binary dumps."""


class BadMagicError(FormatError):
    """Stream does not start with the expected magic."""


class TruncatedStreamError(FormatError):
    """Stream ends before the declared payload does."""


class SizeMismatchError(FormatError):
    """Stream has trailing bytes beyond the declared payload."""


class HeaderFieldError(FormatError):
    """Header field holds an invalid value."""


class PayloadError(FormatError):
    """Payload violates a content invariant (non-finite entry, bad label)."""


class _Cursor:
    """Sequential reader over an immutable byte buffer with typed errors."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise TruncatedStreamError(
                f"need {n} bytes at offset {self._pos}, "
                f"only {len(self._data) - self._pos} remain"
            )
        out = self._data[self._pos:end]
        self._pos = end
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count), dtype=dtype)

    def finish(self) -> None:
        if self._pos != len(self._data):
            raise SizeMismatchError(
                f"{len(self._data) - self._pos} trailing bytes after payload"
            )


def _read_all(source: Source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes()
    return source.read()


def _write_all(sink: Sink, payload: bytes) -> int:
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(payload)
    else:
        sink.write(payload)
    return len(payload)


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, order="C", copy=True)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


def _as_int_vector(value, name: str, n: int) -> np.ndarray:
    arr = np.array(value, dtype=np.int32, order="C", copy=True)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Penultimate features plus classifier logits for n samples.

    features: (n, d) float64, logits: (n, c) float64, labels/groups optional
    (n,) int32. Arrays are copied and frozen; n >= 1, d >= 1, c >= 2, all
    entries finite, labels non-negative when present.
    """

    features: np.ndarray
    logits: np.ndarray
    labels: np.ndarray | None = None
    groups: np.ndarray | None = None

    def __post_init__(self):
        feats = _as_matrix(self.features, "features")
        logits = _as_matrix(self.logits, "logits")
        if feats.shape[0] != logits.shape[0]:
            raise ValueError(
                f"features has {feats.shape[0]} rows, logits has {logits.shape[0]}"
            )
        n = feats.shape[0]
        if n < 1:
            raise ValueError("need at least one sample")
        if feats.shape[1] < 1:
            raise ValueError("feature dimension must be >= 1")
        if logits.shape[1] < 2:
            raise ValueError("need at least two classes of logits")
        labels = self.labels
        if labels is not None:
            labels = _as_int_vector(labels, "labels", n)
            if np.any(labels < 0):
                raise ValueError("labels must be non-negative")
        groups = self.groups
        if groups is not None:
            groups = _as_int_vector(groups, "groups", n)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "groups", groups)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def c(self) -> int:
        return self.logits.shape[1]

    def predictions(self) -> np.ndarray:
        """Argmax class per row; ties resolve to the lowest index."""
        return np.argmax(self.logits, axis=1)

    def take(self, indices) -> "EmbeddingSet":
        """Row subset in the given order."""
        idx = np.asarray(indices)
        return EmbeddingSet(
            features=self.features[idx],
            logits=self.logits[idx],
            labels=None if self.labels is None else self.labels[idx],
            groups=None if self.groups is None else self.groups[idx],
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        def same(a, b):
            if (a is None) != (b is None):
                return False
            return a is None or (a.shape == b.shape and np.array_equal(a, b))
        return (
            same(self.features, other.features)
            and same(self.logits, other.logits)
            and same(self.labels, other.labels)
            and same(self.groups, other.groups)
        )


@dataclass(frozen=True, eq=False)
class ModelHead:
    """Final linear layer: weight (c, d), bias (c,), float64, finite."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = _as_matrix(self.weight, "weight")
        b = np.array(self.bias, dtype=np.float64, order="C", copy=True)
        if b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ValueError(
                f"bias must have shape ({w.shape[0]},), got {b.shape}"
            )
        if not np.all(np.isfinite(b)):
            raise ValueError("bias contains non-finite entries")
        if w.shape[0] < 2:
            raise ValueError("head needs at least two classes")
        if w.shape[1] < 1:
            raise ValueError("head input dimension must be >= 1")
        b.flags.writeable = False
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def c(self) -> int:
        return self.weight.shape[0]

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        """Recompute logits as features @ W.T + b in float64."""
        return np.asarray(features, dtype=np.float64) @ self.weight.T + self.bias

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelHead):
            return NotImplemented
        return (
            self.weight.shape == other.weight.shape
            and np.array_equal(self.weight, other.weight)
            and np.array_equal(self.bias, other.bias)
        )


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_eds(embedding_set: EmbeddingSet, sink: Sink) -> int:
    """Serialize an EmbeddingSet; returns the byte count written."""
    es = embedding_set
    flags = 0
    if es.labels is not None:
        flags |= FLAG_LABELS
    if es.groups is not None:
        flags |= FLAG_GROUPS
    parts = [
        EDS_MAGIC,
        struct.pack("<IIIB3x", es.n, es.d, es.c, flags),
        _f32_bytes(es.features),
        _f32_bytes(es.logits),
    ]
    if es.labels is not None:
        parts.append(np.ascontiguousarray(es.labels, dtype="<i4").tobytes())
    if es.groups is not None:
        parts.append(np.ascontiguousarray(es.groups, dtype="<i4").tobytes())
    return _write_all(sink, b"".join(parts))


def read_eds(source: Source) -> EmbeddingSet:
    """Parse an EmbeddingSet, raising a FormatError subclass on any defect."""
    data = _read_all(source)
    cur = _Cursor(data)
    magic = cur.take(8)
    if magic != EDS_MAGIC:
        raise BadMagicError(f"expected {EDS_MAGIC!r}, got {magic!r}")
    n = cur.u32()
    d = cur.u32()
    c = cur.u32()
    flags_byte, r0, r1, r2 = struct.unpack("<4B", cur.take(4))
    if (r0, r1, r2) != (0, 0, 0):
        raise HeaderFieldError("reserved header bytes must be zero")
    if flags_byte & ~_KNOWN_FLAGS:
        raise HeaderFieldError(f"unknown flag bits 0x{flags_byte:02x}")
    if n < 1:
        raise HeaderFieldError("sample count must be >= 1")
    if d < 1:
        raise HeaderFieldError("feature dimension must be >= 1")
    if c < 2:
        raise HeaderFieldError("class count must be >= 2")
    expected = 24 + 4 * n * (d + c)
    if flags_byte & FLAG_LABELS:
        expected += 4 * n
    if flags_byte & FLAG_GROUPS:
        expected += 4 * n
    if len(data) < expected:
        raise TruncatedStreamError(
            f"stream has {len(data)} bytes, format requires {expected}"
        )
    if len(data) > expected:
        raise SizeMismatchError(
            f"stream has {len(data)} bytes, format requires {expected}"
        )
    features = cur.array("<f4", n * d).reshape(n, d)
    logits = cur.array("<f4", n * c).reshape(n, c)
    labels = cur.array("<i4", n) if flags_byte & FLAG_LABELS else None
    groups = cur.array("<i4", n) if flags_byte & FLAG_GROUPS else None
    cur.finish()
    if not np.all(np.isfinite(features)):
        raise PayloadError("features contain non-finite entries")
    if not np.all(np.isfinite(logits)):
        raise PayloadError("logits contain non-finite entries")
    if labels is not None and np.any(labels < 0):
        raise PayloadError("labels must be non-negative")
    try:
        return EmbeddingSet(
            features=features, logits=logits, labels=labels, groups=groups
        )
    except ValueError as exc:  # construction re-checks; keep errors typed
        raise PayloadError(str(exc)) from exc


def write_head(head: ModelHead, sink: Sink) -> int:
    """Serialize a ModelHead; returns the byte count written."""
    parts = [
        HEAD_MAGIC,
        struct.pack("<II", head.c, head.d),
        _f32_bytes(head.weight),
        _f32_bytes(head.bias),
    ]
    return _write_all(sink, b"".join(parts))


def read_head(source: Source) -> ModelHead:
    """Parse a ModelHead, raising a FormatError subclass on any defect."""
    data = _read_all(source)
    cur = _Cursor(data)
    magic = cur.take(8)
    if magic != HEAD_MAGIC:
        raise BadMagicError(f"expected {HEAD_MAGIC!r}, got {magic!r}")
    c = cur.u32()
    d = cur.u32()
    if c < 2:
        raise HeaderFieldError("class count must be >= 2")
    if d < 1:
        raise HeaderFieldError("input dimension must be >= 1")
    expected = 16 + 4 * c * d + 4 * c
    if len(data) < expected:
        raise TruncatedStreamError(
            f"stream has {len(data)} bytes, format requires {expected}"
        )
    if len(data) > expected:
        raise SizeMismatchError(
            f"stream has {len(data)} bytes, format requires {expected}"
        )
    weight = cur.array("<f4", c * d).reshape(c, d)
    bias = cur.array("<f4", c)
    cur.finish()
    if not np.all(np.isfinite(weight)) or not np.all(np.isfinite(bias)):
        raise PayloadError("head contains non-finite entries")
    try:
        return ModelHead(weight=weight, bias=bias)
    except ValueError as exc:
        raise PayloadError(str(exc)) from exc
