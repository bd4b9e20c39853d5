"""The extraction job: folder in, EDS + HEAD + sidecars out."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import inference_transform, load_image, scan_folder
from .dumps import write_eds, write_head
from .models import ExtractError, capture, find_linear_head, head_arrays, resolve_model

POOL_CHOICES = ("auto", "cls", "mean")


@dataclass(frozen=True)
class ExtractionJob:
    model: str
    data_root: Path
    out_prefix: Path
    weights: str | None = None
    crop: int = 224
    batch_size: int = 32
    device: str = "cpu"
    pool: str = "auto"
    threads: int = 1

    def __post_init__(self):
        if self.crop <= 0:
            raise ExtractError(f"crop must be positive, got {self.crop}")
        if self.batch_size <= 0:
            raise ExtractError(f"batch size must be positive, got {self.batch_size}")
        if self.threads <= 0:
            raise ExtractError(f"threads must be positive, got {self.threads}")
        if self.pool not in POOL_CHOICES:
            raise ExtractError(f"pool must be one of {POOL_CHOICES}")


@dataclass(frozen=True)
class ExtractionResult:
    eds_path: Path
    head_path: Path
    classes_path: Path
    skips_path: Path
    n_rows: int
    classes: tuple[str, ...]
    skipped: tuple[str, ...] = field(default_factory=tuple)


def extract(job: ExtractionJob) -> ExtractionResult:
    # fixed thread count keeps reruns byte-identical
    torch.set_num_threads(job.threads)
    device = torch.device(job.device)

    model = resolve_model(job.model, job.weights)
    model.eval().to(device)
    find_linear_head(model)  # fail before any decoding work

    samples, classes = scan_folder(job.data_root)
    transform = inference_transform(job.crop)

    tensors, labels, skipped = [], [], []
    for path, label in samples:
        tensor, reason = load_image(path, transform)
        if tensor is None:
            skipped.append(f"{path.relative_to(job.data_root)}\t{reason}")
            continue
        tensors.append(tensor)
        labels.append(label)
    if not tensors:
        raise ExtractError("every file failed to decode, nothing to write")

    feature_blocks, logit_blocks = [], []
    for start in range(0, len(tensors), job.batch_size):
        batch = torch.stack(tensors[start : start + job.batch_size]).to(device)
        feats, logits = capture(model, batch, job.pool)
        feature_blocks.append(feats.cpu().numpy())
        logit_blocks.append(logits.cpu().numpy())

    features = np.concatenate(feature_blocks, axis=0)
    logits = np.concatenate(logit_blocks, axis=0)
    weight, bias = head_arrays(find_linear_head(model))

    prefix = job.out_prefix
    prefix.parent.mkdir(parents=True, exist_ok=True)
    eds_path = prefix.with_suffix(".eds")
    head_path = prefix.with_suffix(".head")
    classes_path = prefix.with_suffix(".classes.txt")
    skips_path = prefix.with_suffix(".skipped.txt")

    write_eds(features, logits, np.asarray(labels, dtype=np.int32), eds_path)
    write_head(weight, bias, head_path)
    classes_path.write_text(
        "".join(f"{idx}\t{name}\n" for idx, name in enumerate(classes))
    )
    skips_path.write_text("".join(line + "\n" for line in skipped))

    return ExtractionResult(
        eds_path=eds_path,
        head_path=head_path,
        classes_path=classes_path,
        skips_path=skips_path,
        n_rows=features.shape[0],
        classes=tuple(classes),
        skipped=tuple(skipped),
    )
