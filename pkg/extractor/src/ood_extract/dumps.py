"""Binary writers for the embedding-dump and head formats.

Little-endian throughout. Features and logits are stored as float32 row-major
blocks, labels as int32. The layouts here mirror what the scoring toolkit's
readers expect byte for byte; the files are the only contract between the two
packages.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

EDS_MAGIC = b"OODEDS01"
HEAD_MAGIC = b"OODHEAD1"
FLAG_LABELS = 0x01


class DumpError(ValueError):
    pass


def _f32_block(name: str, arr: np.ndarray) -> bytes:
    out = np.ascontiguousarray(arr, dtype="<f4")
    if not np.isfinite(out).all():
        raise DumpError(f"{name} contains non-finite values")
    return out.tobytes()


def write_eds(
    features: np.ndarray,
    logits: np.ndarray,
    labels: np.ndarray,
    path: Path,
) -> int:
    features = np.asarray(features)
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if features.ndim != 2 or logits.ndim != 2 or labels.ndim != 1:
        raise DumpError("features (n, d), logits (n, c), labels (n,) expected")
    n, d = features.shape
    c = logits.shape[1]
    if logits.shape[0] != n or labels.shape[0] != n:
        raise DumpError("row counts disagree")
    if n < 1 or d < 1 or c < 2:
        raise DumpError(f"unwritable shape n={n} d={d} c={c}")
    if labels.min() < 0:
        raise DumpError("negative label")

    blob = EDS_MAGIC + struct.pack("<IIIB3x", n, d, c, FLAG_LABELS)
    blob += _f32_block("features", features)
    blob += _f32_block("logits", logits)
    blob += np.ascontiguousarray(labels, dtype="<i4").tobytes()
    path.write_bytes(blob)
    return len(blob)


def write_head(weight: np.ndarray, bias: np.ndarray, path: Path) -> int:
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise DumpError("weight (c, d) and bias (c,) expected")
    c, d = weight.shape
    if c < 2 or d < 1:
        raise DumpError(f"unwritable head shape c={c} d={d}")
    blob = HEAD_MAGIC + struct.pack("<II", c, d)
    blob += _f32_block("weight", weight)
    blob += _f32_block("bias", bias)
    path.write_bytes(blob)
    return len(blob)
