"""Open-set evaluation sweeps.

A run is a grid of cells (split x seed x detector). Splits hold out class
subsets from one labeled dump family: held-out rows become semantic OOD, all
other roles drop them. Each cell fits on the (optionally subsampled) train
rows and reports ID accuracy, semantic-OOD AUROC, covariate accuracy, and the
misclassification PRR over pooled covariate rows. Ensemble member dumps add
total/epistemic-uncertainty cells. Cell failures are recorded per cell and
never abort the sweep; configuration problems abort up front.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detectors import DetectorConfig, DetectorKind, fit, score
from .eds import EmbeddingSet, FormatError, ModelHead, read_eds, read_head
from .ensemble import EnsembleBatch, epistemic_uncertainty, total_uncertainty
from .manifest import DatasetManifest, ManifestError
from .metrics import (
    DegenerateMetricError,
    auroc,
    balanced_accuracy,
    prr_detailed,
)

THREADS_ENV = "OODKIT_THREADS"
ALL_DETECTORS = tuple(k.value for k in DetectorKind)


class ConfigError(ValueError):
    """Configuration or referenced data is unusable; nothing was evaluated."""


@dataclass(frozen=True)
class OsrSplit:
    split_id: str
    held_out: tuple[int, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    manifest_path: Path
    detectors: tuple[DetectorConfig, ...]
    splits: tuple[OsrSplit, ...]
    seeds: tuple[int, ...]
    train_subsample: int | None
    output_dir: Path
    threads: int
    raw: dict = field(repr=False)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {
            "manifest", "detectors", "overrides", "osr_splits", "seeds",
            "train_subsample", "output_dir", "threads",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "manifest" not in raw or not isinstance(raw["manifest"], str):
            raise ConfigError("config needs a 'manifest' path string")

        names = raw.get("detectors", list(ALL_DETECTORS))
        if not isinstance(names, list) or any(not isinstance(x, str) for x in names):
            raise ConfigError("'detectors' must be a list of detector names")
        if len(set(names)) != len(names):
            raise ConfigError("'detectors' has duplicates")
        overrides = raw.get("overrides", {})
        if not isinstance(overrides, dict):
            raise ConfigError("'overrides' must be an object")
        allowed = {"react_q", "knn_k", "vim_dim", "gen_gamma"}
        bad = set(overrides) - allowed
        if bad:
            raise ConfigError(f"unknown override keys: {sorted(bad)}")
        try:
            detectors = tuple(
                DetectorConfig(kind=DetectorKind(name), **overrides)
                for name in names
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

        splits_raw = raw.get("osr_splits", [])
        if not isinstance(splits_raw, list):
            raise ConfigError("'osr_splits' must be a list")
        splits = []
        for i, entry in enumerate(splits_raw):
            if (
                not isinstance(entry, dict)
                or not isinstance(entry.get("id"), str)
                or not isinstance(entry.get("held_out"), list)
                or any(not isinstance(h, int) for h in entry["held_out"])
            ):
                raise ConfigError(
                    f"osr_splits[{i}] must look like "
                    '{"id": str, "held_out": [int, ...]}'
                )
            splits.append(OsrSplit(entry["id"], tuple(entry["held_out"])))
        if not splits:
            splits = [OsrSplit("all", ())]
        ids = [s.split_id for s in splits]
        if len(set(ids)) != len(ids):
            raise ConfigError("osr split ids must be unique")

        seeds = raw.get("seeds", [0])
        if (
            not isinstance(seeds, list)
            or not seeds
            or any(not isinstance(s, int) for s in seeds)
        ):
            raise ConfigError("'seeds' must be a non-empty list of ints")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("'seeds' has duplicates")

        subsample = raw.get("train_subsample")
        if subsample is not None and (not isinstance(subsample, int) or subsample < 1):
            raise ConfigError("'train_subsample' must be a positive int or null")

        threads = raw.get("threads", 1)
        if not isinstance(threads, int) or threads < 1:
            raise ConfigError("'threads' must be a positive int")

        output_dir = raw.get("output_dir", ".")
        if not isinstance(output_dir, str):
            raise ConfigError("'output_dir' must be a path string")

        return cls(
            manifest_path=base_dir / raw["manifest"],
            detectors=detectors,
            splits=tuple(splits),
            seeds=tuple(seeds),
            train_subsample=subsample,
            output_dir=base_dir / output_dir,
            threads=threads,
            raw=raw,
        )


def effective_threads(requested: int) -> int:
    """Worker count after applying the OODKIT_THREADS environment cap."""
    cap = os.environ.get(THREADS_ENV)
    if cap is None:
        return requested
    try:
        cap_value = int(cap)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    if cap_value < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return min(requested, cap_value)


@dataclass(frozen=True)
class CellResult:
    split: str
    seed: int
    detector: str | None
    status: str
    reason: str | None
    id_accuracy: float | None
    s_oodd_auroc: float | None
    cov_accuracy: float | None
    mc_oodd_prr: float | None
    mc_oodd_prr_tie_randomized: float | None
    per_dump_prr: dict | None
    counts: dict

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "seed": self.seed,
            "detector": self.detector,
            "status": self.status,
            "reason": self.reason,
            "id_accuracy": self.id_accuracy,
            "s_oodd_auroc": self.s_oodd_auroc,
            "cov_accuracy": self.cov_accuracy,
            "mc_oodd_prr": self.mc_oodd_prr,
            "mc_oodd_prr_tie_randomized": self.mc_oodd_prr_tie_randomized,
            "per_dump_prr": self.per_dump_prr,
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CellResult":
        return cls(**raw)


@dataclass(frozen=True)
class EvalReport:
    config: dict
    cells: tuple[CellResult, ...]
    aggregates: dict

    def all_ok(self) -> bool:
        return all(cell.status == "ok" for cell in self.cells)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "cells": [cell.to_dict() for cell in self.cells],
            "aggregates": self.aggregates,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        return cls(
            config=raw["config"],
            cells=tuple(CellResult.from_dict(c) for c in raw["cells"]),
            aggregates=raw["aggregates"],
        )


# --- data loading and split resolution ---------------------------------------


@dataclass
class _Bundle:
    id_train: EmbeddingSet
    id_test: EmbeddingSet
    semantic: EmbeddingSet | None
    covariate: list[tuple[str, EmbeddingSet]]
    head: ModelHead | None
    id_test_members: list[EmbeddingSet]
    semantic_members: list[EmbeddingSet]
    covariate_members: list[list[tuple[str, EmbeddingSet]]]


def _load_dump(path: Path, role: str) -> EmbeddingSet:
    try:
        return read_eds(path)
    except (OSError, FormatError) as exc:
        raise ConfigError(f"{role} dump {path}: {exc}") from exc


def _check_member_alignment(members: Sequence[EmbeddingSet], role: str) -> None:
    first = members[0]
    for i, m in enumerate(members[1:], start=1):
        if m.n != first.n:
            raise ConfigError(f"{role} member {i} row count differs from member 0")
        lab_a, lab_b = first.labels, m.labels
        if (lab_a is None) != (lab_b is None) or (
            lab_a is not None and not np.array_equal(lab_a, lab_b)
        ):
            raise ConfigError(f"{role} member {i} labels differ from member 0")


def _load_bundle(config: ExperimentConfig) -> _Bundle:
    try:
        manifest = DatasetManifest.load(config.manifest_path)
    except ManifestError as exc:
        raise ConfigError(str(exc)) from exc

    id_train = _load_dump(manifest.id_train, "id_train")
    id_test = _load_dump(manifest.id_test, "id_test")
    semantic = (
        _load_dump(manifest.semantic_ood, "semantic_ood")
        if manifest.semantic_ood
        else None
    )
    covariate = [
        (p.name, _load_dump(p, f"covariate_ood[{i}]"))
        for i, p in enumerate(manifest.covariate_ood)
    ]
    head = None
    if manifest.head:
        try:
            head = read_head(manifest.head)
        except (OSError, FormatError) as exc:
            raise ConfigError(f"head {manifest.head}: {exc}") from exc

    id_members = [
        _load_dump(p, f"id_test_members[{i}]")
        for i, p in enumerate(manifest.id_test_members)
    ]
    sem_members = [
        _load_dump(p, f"semantic_ood_members[{i}]")
        for i, p in enumerate(manifest.semantic_ood_members)
    ]
    cov_members = [
        [
            (p.name, _load_dump(p, f"covariate_ood_members[{i}][{j}]"))
            for j, p in enumerate(row)
        ]
        for i, row in enumerate(manifest.covariate_ood_members)
    ]

    all_sets = (
        [id_train, id_test]
        + ([semantic] if semantic else [])
        + [s for _, s in covariate]
        + id_members
        + sem_members
        + [s for row in cov_members for _, s in row]
    )
    dims = {s.d for s in all_sets}
    if len(dims) != 1:
        raise ConfigError(f"referenced dumps disagree on feature dim: {sorted(dims)}")
    widths = {s.c for s in all_sets}
    if len(widths) != 1:
        raise ConfigError(f"referenced dumps disagree on class count: {sorted(widths)}")
    if head is not None and (head.d != id_train.d or head.c != id_train.c):
        raise ConfigError(
            f"head shape ({head.c}, {head.d}) does not match dumps "
            f"(c={id_train.c}, d={id_train.d})"
        )

    if sem_members and not id_members:
        raise ConfigError("semantic_ood_members given without id_test_members")
    if cov_members and not id_members:
        raise ConfigError("covariate_ood_members given without id_test_members")
    if id_members:
        _check_member_alignment(id_members, "id_test")
        if sem_members:
            _check_member_alignment(sem_members, "semantic_ood")
        if cov_members:
            shift_counts = {len(row) for row in cov_members}
            if len(shift_counts) != 1:
                raise ConfigError("covariate member lists differ in length")
            for j in range(len(cov_members[0])):
                _check_member_alignment(
                    [row[j][1] for row in cov_members], f"covariate_ood[{j}]"
                )
        if sem_members and len(sem_members) != len(id_members):
            raise ConfigError("member counts differ across roles")
        if cov_members and len(cov_members) != len(id_members):
            raise ConfigError("member counts differ across roles")

    for name, cov_set in covariate:
        if cov_set.labels is None:
            raise ConfigError(f"covariate dump {name} has no labels")
    for row in cov_members:
        for name, cov_set in row:
            if cov_set.labels is None:
                raise ConfigError(f"covariate member dump {name} has no labels")

    return _Bundle(
        id_train=id_train,
        id_test=id_test,
        semantic=semantic,
        covariate=covariate,
        head=head,
        id_test_members=id_members,
        semantic_members=sem_members,
        covariate_members=cov_members,
    )


def _keep_rows(es: EmbeddingSet, held: set, role: str) -> EmbeddingSet:
    if es.labels is None:
        raise ConfigError(f"{role} needs labels for class-held-out splits")
    idx = np.nonzero(~np.isin(es.labels, list(held)))[0]
    if idx.size == 0:
        raise ConfigError(f"split leaves no rows in {role}")
    return es.take(idx)


def _held_rows(es: EmbeddingSet, held: set) -> np.ndarray:
    return np.nonzero(np.isin(es.labels, list(held)))[0]


def _concat_sets(sets: Sequence[EmbeddingSet]) -> EmbeddingSet:
    if len(sets) == 1:
        return sets[0]
    has_labels = all(s.labels is not None for s in sets)
    has_groups = all(s.groups is not None for s in sets)
    return EmbeddingSet(
        features=np.concatenate([s.features for s in sets]),
        logits=np.concatenate([s.logits for s in sets]),
        labels=np.concatenate([s.labels for s in sets]) if has_labels else None,
        groups=np.concatenate([s.groups for s in sets]) if has_groups else None,
    )


@dataclass
class _SplitData:
    id_train: EmbeddingSet
    id_test: EmbeddingSet
    semantic: EmbeddingSet | None
    covariate: list[tuple[str, EmbeddingSet]]
    id_members: list[EmbeddingSet]
    semantic_members: list[EmbeddingSet]
    covariate_members: list[list[tuple[str, EmbeddingSet]]]


def _resolve_split(bundle: _Bundle, split: OsrSplit) -> _SplitData:
    held = set(split.held_out)
    if not held:
        data = _SplitData(
            id_train=bundle.id_train,
            id_test=bundle.id_test,
            semantic=bundle.semantic,
            covariate=list(bundle.covariate),
            id_members=list(bundle.id_test_members),
            semantic_members=list(bundle.semantic_members),
            covariate_members=[list(row) for row in bundle.covariate_members],
        )
    else:
        id_train = _keep_rows(bundle.id_train, held, "id_train")
        id_test = _keep_rows(bundle.id_test, held, "id_test")
        sem_parts = []
        held_idx = _held_rows(bundle.id_test, held)
        if held_idx.size:
            sem_parts.append(bundle.id_test.take(held_idx))
        if bundle.semantic is not None:
            sem_parts.append(bundle.semantic)
        if not sem_parts:
            raise ConfigError(
                f"split {split.split_id!r}: no held-out rows in id_test and "
                "no semantic_ood dump"
            )
        covariate = [
            (name, _keep_rows(s, held, f"covariate_ood {name}"))
            for name, s in bundle.covariate
        ]
        id_members = [
            _keep_rows(m, held, "id_test_members") for m in bundle.id_test_members
        ]
        sem_members = []
        if bundle.id_test_members:
            member_held = [
                m.take(_held_rows(m, held)) if _held_rows(m, held).size else None
                for m in bundle.id_test_members
            ]
            for i, m in enumerate(bundle.id_test_members):
                parts = []
                if member_held[i] is not None:
                    parts.append(member_held[i])
                if bundle.semantic_members:
                    parts.append(bundle.semantic_members[i])
                if parts:
                    sem_members.append(_concat_sets(parts))
        cov_members = [
            [
                (name, _keep_rows(s, held, f"covariate member {name}"))
                for name, s in row
            ]
            for row in bundle.covariate_members
        ]
        data = _SplitData(
            id_train=id_train,
            id_test=id_test,
            semantic=_concat_sets(sem_parts) if sem_parts else None,
            covariate=covariate,
            id_members=id_members,
            semantic_members=sem_members,
            covariate_members=cov_members,
        )

    train_labels = data.id_train.labels
    test_labels = data.id_test.labels
    if train_labels is not None and test_labels is not None:
        unseen = set(np.unique(test_labels)) - set(np.unique(train_labels))
        if unseen:
            raise ConfigError(
                f"split {split.split_id!r}: id_test classes "
                f"{sorted(int(u) for u in unseen)} never appear in id_train"
            )
    return data


# --- per-(split, seed) shared context ----------------------------------------


@dataclass
class _DeContext:
    id_batch: EnsembleBatch
    semantic_batch: EnsembleBatch | None
    cov_batch: EnsembleBatch | None
    cov_slices: list[tuple[str, slice]]
    id_accuracy: float | None
    cov_accuracy: float | None
    cov_correct: np.ndarray | None
    counts: dict


@dataclass
class _Context:
    split_id: str
    seed: int
    train: EmbeddingSet
    head: ModelHead | None
    id_test: EmbeddingSet
    semantic: EmbeddingSet | None
    cov_pooled: EmbeddingSet | None
    cov_slices: list[tuple[str, slice]]
    id_accuracy: float | None
    cov_accuracy: float | None
    cov_correct: np.ndarray | None
    counts: dict
    de: _DeContext | None


def _subsample(train: EmbeddingSet, size: int | None, seed: int) -> EmbeddingSet:
    if size is None or size >= train.n:
        return train
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(train.n, size=size, replace=False))
    return train.take(idx)


def _pool_with_slices(
    sets: Sequence[tuple[str, EmbeddingSet]]
) -> tuple[EmbeddingSet, list[tuple[str, slice]]]:
    slices = []
    start = 0
    for name, s in sets:
        slices.append((name, slice(start, start + s.n)))
        start += s.n
    return _concat_sets([s for _, s in sets]), slices


def _make_de_context(data: _SplitData) -> _DeContext | None:
    if not data.id_members:
        return None
    id_batch = EnsembleBatch.from_sets(data.id_members)
    labels = data.id_members[0].labels
    id_accuracy = (
        balanced_accuracy(id_batch.predictions(), labels)
        if labels is not None
        else None
    )
    semantic_batch = (
        EnsembleBatch.from_sets(data.semantic_members)
        if data.semantic_members
        else None
    )
    cov_batch = None
    cov_slices: list[tuple[str, slice]] = []
    cov_accuracy = None
    cov_correct = None
    if data.covariate_members:
        pooled_per_member = []
        for row in data.covariate_members:
            pooled, cov_slices = _pool_with_slices(row)
            pooled_per_member.append(pooled)
        cov_batch = EnsembleBatch.from_sets(pooled_per_member)
        cov_labels = pooled_per_member[0].labels
        preds = cov_batch.predictions()
        cov_accuracy = balanced_accuracy(preds, cov_labels)
        cov_correct = preds == cov_labels
    counts = {
        "id_test": id_batch.n,
        "semantic_ood": semantic_batch.n if semantic_batch else 0,
        "covariate_ood": cov_batch.n if cov_batch else 0,
        "members": id_batch.n_members,
    }
    return _DeContext(
        id_batch=id_batch,
        semantic_batch=semantic_batch,
        cov_batch=cov_batch,
        cov_slices=cov_slices,
        id_accuracy=id_accuracy,
        cov_accuracy=cov_accuracy,
        cov_correct=cov_correct,
        counts=counts,
    )


def _make_context(
    data: _SplitData, split_id: str, seed: int, head: ModelHead | None,
    subsample: int | None,
) -> _Context:
    train = _subsample(data.id_train, subsample, seed)
    id_labels = data.id_test.labels
    id_accuracy = (
        balanced_accuracy(data.id_test.predictions(), id_labels)
        if id_labels is not None
        else None
    )
    cov_pooled = None
    cov_slices: list[tuple[str, slice]] = []
    cov_accuracy = None
    cov_correct = None
    if data.covariate:
        cov_pooled, cov_slices = _pool_with_slices(data.covariate)
        preds = cov_pooled.predictions()
        cov_accuracy = balanced_accuracy(preds, cov_pooled.labels)
        cov_correct = preds == cov_pooled.labels
    counts = {
        "id_train": train.n,
        "id_test": data.id_test.n,
        "semantic_ood": data.semantic.n if data.semantic else 0,
        "covariate_ood": cov_pooled.n if cov_pooled else 0,
    }
    return _Context(
        split_id=split_id,
        seed=seed,
        train=train,
        head=head,
        id_test=data.id_test,
        semantic=data.semantic,
        cov_pooled=cov_pooled,
        cov_slices=cov_slices,
        id_accuracy=id_accuracy,
        cov_accuracy=cov_accuracy,
        cov_correct=cov_correct,
        counts=counts,
        de=_make_de_context(data),
    )


# --- cells --------------------------------------------------------------------


def _mc_metrics(
    scores: np.ndarray,
    correct: np.ndarray,
    slices: Sequence[tuple[str, slice]],
    correct_by_dump: Callable[[slice], np.ndarray],
):
    detail = prr_detailed(scores, correct)
    per_dump = {}
    for name, sl in slices:
        try:
            per_dump[name] = prr_detailed(scores[sl], correct_by_dump(sl)).value
        except DegenerateMetricError:
            per_dump[name] = None
    return detail, per_dump


def _detector_cell(ctx: _Context, config: DetectorConfig) -> CellResult:
    fields = {
        "split": ctx.split_id,
        "seed": ctx.seed,
        "detector": config.kind.value,
        "id_accuracy": ctx.id_accuracy,
        "cov_accuracy": ctx.cov_accuracy,
        "s_oodd_auroc": None,
        "mc_oodd_prr": None,
        "mc_oodd_prr_tie_randomized": None,
        "per_dump_prr": None,
        "counts": ctx.counts,
    }
    try:
        state = fit(config, ctx.train, ctx.head)
        if ctx.semantic is not None:
            id_scores = score(state, ctx.id_test)
            ood_scores = score(state, ctx.semantic)
            fields["s_oodd_auroc"] = auroc(
                np.concatenate([id_scores, ood_scores]),
                np.concatenate(
                    [np.zeros(id_scores.shape[0], bool),
                     np.ones(ood_scores.shape[0], bool)]
                ),
            )
        if ctx.cov_pooled is not None:
            cov_scores = score(state, ctx.cov_pooled)
            detail, per_dump = _mc_metrics(
                cov_scores, ctx.cov_correct, ctx.cov_slices,
                lambda sl: ctx.cov_correct[sl],
            )
            fields["mc_oodd_prr"] = detail.value
            fields["mc_oodd_prr_tie_randomized"] = detail.tie_randomized
            fields["per_dump_prr"] = per_dump
        return CellResult(status="ok", reason=None, **fields)
    except Exception as exc:
        return CellResult(
            status="failed", reason=f"{type(exc).__name__}: {exc}", **fields
        )


def _de_cell(ctx: _Context, which: str) -> CellResult:
    de = ctx.de
    score_fn = total_uncertainty if which == "tu" else epistemic_uncertainty
    fields = {
        "split": ctx.split_id,
        "seed": ctx.seed,
        "detector": which,
        "id_accuracy": de.id_accuracy,
        "cov_accuracy": de.cov_accuracy,
        "s_oodd_auroc": None,
        "mc_oodd_prr": None,
        "mc_oodd_prr_tie_randomized": None,
        "per_dump_prr": None,
        "counts": de.counts,
    }
    try:
        if de.semantic_batch is not None:
            id_scores = score_fn(de.id_batch)
            ood_scores = score_fn(de.semantic_batch)
            fields["s_oodd_auroc"] = auroc(
                np.concatenate([id_scores, ood_scores]),
                np.concatenate(
                    [np.zeros(id_scores.shape[0], bool),
                     np.ones(ood_scores.shape[0], bool)]
                ),
            )
        if de.cov_batch is not None:
            cov_scores = score_fn(de.cov_batch)
            detail, per_dump = _mc_metrics(
                cov_scores, de.cov_correct, de.cov_slices,
                lambda sl: de.cov_correct[sl],
            )
            fields["mc_oodd_prr"] = detail.value
            fields["mc_oodd_prr_tie_randomized"] = detail.tie_randomized
            fields["per_dump_prr"] = per_dump
        return CellResult(status="ok", reason=None, **fields)
    except Exception as exc:
        return CellResult(
            status="failed", reason=f"{type(exc).__name__}: {exc}", **fields
        )


def _accuracy_cell(ctx: _Context) -> CellResult:
    return CellResult(
        split=ctx.split_id,
        seed=ctx.seed,
        detector=None,
        status="ok",
        reason=None,
        id_accuracy=ctx.id_accuracy,
        s_oodd_auroc=None,
        cov_accuracy=ctx.cov_accuracy,
        mc_oodd_prr=None,
        mc_oodd_prr_tie_randomized=None,
        per_dump_prr=None,
        counts=ctx.counts,
    )


# --- aggregation and entry point ----------------------------------------------


def _stats(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "n": int(arr.shape[0]),
    }


def _aggregate(cells: Sequence[CellResult], detector_order: Sequence[str]) -> dict:
    aggregates: dict = {}

    def collect(rows, attr):
        vals = [
            getattr(c, attr) for c in rows
            if c.status == "ok" and getattr(c, attr) is not None
        ]
        return _stats(vals) if vals else None

    seen_contexts = {}
    for c in cells:
        seen_contexts.setdefault((c.split, c.seed), c)
    model_rows = list(seen_contexts.values())
    model = {
        "id_accuracy": collect(model_rows, "id_accuracy"),
        "cov_accuracy": collect(model_rows, "cov_accuracy"),
    }
    aggregates["model"] = {k: v for k, v in model.items() if v is not None}

    for name in detector_order:
        rows = [c for c in cells if c.detector == name]
        if not rows:
            continue
        entry = {}
        for attr in ("s_oodd_auroc", "mc_oodd_prr"):
            stats = collect(rows, attr)
            if stats is not None:
                entry[attr] = stats
        aggregates[name] = entry
    return aggregates


def run_experiment(config: ExperimentConfig) -> EvalReport:
    """Execute every configured cell and assemble the report deterministically."""
    bundle = _load_bundle(config)
    contexts = []
    for split in config.splits:
        data = _resolve_split(bundle, split)
        for seed in config.seeds:
            contexts.append(
                _make_context(
                    data, split.split_id, seed, bundle.head, config.train_subsample
                )
            )

    jobs: list[Callable[[], CellResult]] = []
    detector_order = [d.kind.value for d in config.detectors]
    for ctx in contexts:
        if config.detectors:
            for det in config.detectors:
                jobs.append(lambda ctx=ctx, det=det: _detector_cell(ctx, det))
        else:
            jobs.append(lambda ctx=ctx: _accuracy_cell(ctx))
        if ctx.de is not None:
            jobs.append(lambda ctx=ctx: _de_cell(ctx, "tu"))
            jobs.append(lambda ctx=ctx: _de_cell(ctx, "eu"))
    if contexts and contexts[0].de is not None:
        detector_order += ["tu", "eu"]

    workers = effective_threads(config.threads)
    if workers == 1 or len(jobs) <= 1:
        cells = [job() for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(lambda job: job(), jobs))

    return EvalReport(
        config=config.raw,
        cells=tuple(cells),
        aggregates=_aggregate(cells, detector_order),
    )
