"""Extractor tests: a 20-image folder through a seeded ResNet-18 checkpoint.

Pretrained torchvision weights need network access, so the checkpoint fixture
saves a seeded random initialization instead; the capture path, file layout,
and consistency guarantees are identical either way.
"""
import warnings

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn
from torchvision.models import get_model
from torchvision.models.vision_transformer import VisionTransformer

from ood_extract import (
    ExtractError,
    ExtractionJob,
    capture,
    extract,
    find_linear_head,
)
from ood_extract.cli import main

import oodkit

CROP = 64


@pytest.fixture(scope="session")
def image_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(5)
    for cls, tint in (("benign", 40), ("tumor", 180)):
        folder = root / cls
        folder.mkdir()
        for i in range(10):
            h, w = int(rng.integers(50, 90)), int(rng.integers(50, 90))
            pixels = rng.integers(0, 100, size=(h, w, 3), dtype=np.uint8) + tint
            Image.fromarray(pixels, "RGB").save(folder / f"img_{i:02d}.png")
    (root / "benign" / "not_an_image.png").write_text("plain text, no pixels")
    return root


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory):
    torch.manual_seed(7)
    model = get_model("resnet18", weights=None, num_classes=2)
    path = tmp_path_factory.mktemp("ckpt") / "resnet18_seed7.pt"
    torch.save(model.state_dict(), path)
    return path


@pytest.fixture(scope="session")
def first_run(image_root, checkpoint, tmp_path_factory):
    out = tmp_path_factory.mktemp("run1") / "dump"
    job = ExtractionJob(
        model="resnet18",
        data_root=image_root,
        out_prefix=out,
        weights=str(checkpoint),
        crop=CROP,
        batch_size=8,
    )
    return extract(job)


def test_folder_layout_row_order_and_skips(first_run):
    assert first_run.n_rows == 20
    assert first_run.classes == ("benign", "tumor")
    es = oodkit.read_eds(first_run.eds_path)
    assert es.n == 20 and es.d == 512 and es.c == 2
    assert np.array_equal(es.labels, np.repeat([0, 1], 10))

    assert first_run.classes_path.read_text() == "0\tbenign\n1\ttumor\n"
    skip_log = first_run.skips_path.read_text()
    assert len(first_run.skipped) == 1
    assert "not_an_image.png" in skip_log


def test_primary_reads_warning_free_and_logits_match_head(first_run):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        es = oodkit.read_eds(first_run.eds_path)
        head = oodkit.read_head(first_run.head_path)
        oodkit.fit(oodkit.DetectorKind.REACT_ENERGY, es, head)
        oodkit.fit(oodkit.DetectorKind.VIM, es, head)

    drift = float(np.max(np.abs(head.logits(es.features) - es.logits)))
    assert drift <= 1e-3
    print(
        f"[PASS] extractor consistency: stored vs head-recomputed logits "
        f"max abs diff {drift:.2e} (<= 1e-3); EDS and HEAD load warning-free"
    )


def test_detectors_run_on_the_dump(first_run):
    es = oodkit.read_eds(first_run.eds_path)
    for kind in (oodkit.DetectorKind.MSP, oodkit.DetectorKind.MAHA,
                 oodkit.DetectorKind.KNN):
        scores = oodkit.score(oodkit.fit(kind, es), es)
        assert scores.shape == (20,) and np.isfinite(scores).all()


def test_rerun_is_byte_identical(first_run, image_root, checkpoint, tmp_path):
    job = ExtractionJob(
        model="resnet18",
        data_root=image_root,
        out_prefix=tmp_path / "again",
        weights=str(checkpoint),
        crop=CROP,
        batch_size=8,
    )
    second = extract(job)
    assert second.eds_path.read_bytes() == first_run.eds_path.read_bytes()
    assert second.head_path.read_bytes() == first_run.head_path.read_bytes()


def test_model_without_linear_head_is_explicit_error(tmp_path, image_root):
    torch.manual_seed(0)
    headless = nn.Sequential(nn.Conv2d(3, 4, 3), nn.Flatten())
    with pytest.raises(ExtractError, match="no linear classification head"):
        find_linear_head(headless)

    path = tmp_path / "headless.pt"
    torch.save(headless, path)
    job = ExtractionJob(
        model=str(path), data_root=image_root, out_prefix=tmp_path / "x",
        crop=CROP,
    )
    with pytest.raises(ExtractError, match="no linear classification head"):
        extract(job)


@pytest.fixture(scope="session")
def tiny_vit(tmp_path_factory):
    torch.manual_seed(11)
    model = VisionTransformer(
        image_size=CROP, patch_size=16, num_layers=1, num_heads=2,
        hidden_dim=32, mlp_dim=48, num_classes=3,
    )
    path = tmp_path_factory.mktemp("vit") / "tiny_vit.pt"
    torch.save(model, path)
    return path


def test_transformer_demands_an_explicit_pool_flag(tiny_vit, image_root, tmp_path):
    job = ExtractionJob(
        model=str(tiny_vit), data_root=image_root,
        out_prefix=tmp_path / "vit", crop=CROP,
    )
    with pytest.raises(ExtractError, match="--pool"):
        extract(job)


@pytest.mark.parametrize("pool", ["cls", "mean"])
def test_transformer_pooling_routes(tiny_vit, image_root, tmp_path, pool):
    job = ExtractionJob(
        model=str(tiny_vit), data_root=image_root,
        out_prefix=tmp_path / f"vit_{pool}", crop=CROP, pool=pool,
    )
    result = extract(job)
    es = oodkit.read_eds(result.eds_path)
    head = oodkit.read_head(result.head_path)
    assert es.d == 32 and es.c == 3 and es.n == 20
    drift = float(np.max(np.abs(head.logits(es.features) - es.logits)))
    assert drift <= 1e-3


def test_cls_and_mean_features_differ(tiny_vit, image_root, tmp_path):
    outs = {}
    for pool in ("cls", "mean"):
        job = ExtractionJob(
            model=str(tiny_vit), data_root=image_root,
            out_prefix=tmp_path / pool, crop=CROP, pool=pool,
        )
        outs[pool] = oodkit.read_eds(extract(job).eds_path)
    assert not np.allclose(outs["cls"].features, outs["mean"].features)


def test_capture_pools_three_dim_head_inputs():
    # a per-token head never hits the ViT branch, the shape forces pooling
    class TokenModel(nn.Module):
        def __init__(self):
            super().__init__()
            self.proj = nn.Linear(6, 4)

        def forward(self, x):
            tokens = x.flatten(2).transpose(1, 2)  # (b, 16, 6)
            return self.proj(tokens)

    torch.manual_seed(3)
    model = TokenModel().eval()
    batch = torch.randn(2, 6, 4, 4)
    with pytest.raises(ExtractError, match="--pool"):
        capture(model, batch, "auto")
    feats, logits = capture(model, batch, "mean")
    assert feats.shape == (2, 6) and logits.shape == (2, 4)
    expected = torch.nn.functional.linear(feats, model.proj.weight, model.proj.bias)
    assert torch.equal(logits, expected)


def test_job_validation():
    with pytest.raises(ExtractError, match="crop"):
        ExtractionJob(model="resnet18", data_root=".", out_prefix=".", crop=0)
    with pytest.raises(ExtractError, match="batch"):
        ExtractionJob(model="resnet18", data_root=".", out_prefix=".",
                      batch_size=0)
    with pytest.raises(ExtractError, match="pool"):
        ExtractionJob(model="resnet18", data_root=".", out_prefix=".",
                      pool="median")


def test_bad_dataset_roots(tmp_path, checkpoint):
    job = ExtractionJob(
        model="resnet18", data_root=tmp_path / "missing",
        out_prefix=tmp_path / "x", weights=str(checkpoint), crop=CROP,
    )
    with pytest.raises(ExtractError, match="not a directory"):
        extract(job)

    empty = tmp_path / "empty"
    empty.mkdir()
    job = ExtractionJob(
        model="resnet18", data_root=empty, out_prefix=tmp_path / "x",
        weights=str(checkpoint), crop=CROP,
    )
    with pytest.raises(ExtractError, match="no class subfolders"):
        extract(job)


def test_all_undecodable_is_an_error(tmp_path, checkpoint):
    root = tmp_path / "junk"
    (root / "cls").mkdir(parents=True)
    (root / "cls" / "a.png").write_text("nope")
    job = ExtractionJob(
        model="resnet18", data_root=root, out_prefix=tmp_path / "x",
        weights=str(checkpoint), crop=CROP,
    )
    with pytest.raises(ExtractError, match="failed to decode"):
        extract(job)


def test_unknown_model_name(tmp_path, image_root):
    job = ExtractionJob(
        model="resnet9000", data_root=image_root, out_prefix=tmp_path / "x",
        crop=CROP,
    )
    with pytest.raises(ExtractError, match="unknown model"):
        extract(job)


def test_cli_end_to_end(image_root, checkpoint, tmp_path, capsys):
    out = tmp_path / "cli" / "dump"
    code = main([
        "--model", "resnet18", "--data", str(image_root),
        "--out", str(out), "--crop", str(CROP), "--batch", "8",
        "--weights", str(checkpoint),
    ])
    assert code == 0
    printed = capsys.readouterr().out
    assert "20 rows, 2 classes" in printed
    assert "skipped 1 undecodable" in printed
    assert oodkit.read_eds(out.with_suffix(".eds")).n == 20

    code = main([
        "--model", "resnet18", "--data", str(tmp_path / "nowhere"),
        "--out", str(out),
    ])
    assert code == 2
    assert "error:" in capsys.readouterr().err
