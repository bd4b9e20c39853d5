"""Class-per-subfolder scanning and the inference transform."""
from __future__ import annotations

from pathlib import Path

from PIL import Image
from torchvision import transforms

from .models import ExtractError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def scan_folder(root: Path):
    """Sorted (path, label) pairs plus the index -> class-name mapping.

    Label order follows sorted subfolder names; files sort by name inside
    each class. Every regular file is a candidate; whether it decodes is
    settled later, at load time.
    """
    if not root.is_dir():
        raise ExtractError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ExtractError(f"no class subfolders under {root}")
    classes = [p.name for p in class_dirs]
    samples = []
    for label, class_dir in enumerate(class_dirs):
        for path in sorted(p for p in class_dir.iterdir() if p.is_file()):
            samples.append((path, label))
    if not samples:
        raise ExtractError(f"no files under the class subfolders of {root}")
    return samples, classes


def inference_transform(crop: int):
    # center crop only; shorter side scaled the way 224 pairs with 256
    resize = max(crop, round(crop * 256 / 224))
    return transforms.Compose([
        transforms.Resize(resize),
        transforms.CenterCrop(crop),
        transforms.ToTensor(),
        transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
    ])


def load_image(path: Path, transform):
    """Decoded and transformed tensor, or None plus a reason for the skip log."""
    try:
        with Image.open(path) as img:
            return transform(img.convert("RGB")), None
    except (OSError, Image.DecompressionBombError, SyntaxError) as exc:
        return None, f"{exc.__class__.__name__}: {exc}"
