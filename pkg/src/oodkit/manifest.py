"""Dataset manifest: JSON mapping of dataset roles to dump paths.

Paths resolve relative to the manifest file's directory. Member lists hold
per-ensemble-member dumps for the same underlying samples and must be mutually
row-aligned; covariate member lists are indexed [member][shift].
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class ManifestError(ValueError):
    """Manifest file is malformed or references nothing usable."""


_KNOWN_KEYS = {
    "id_train",
    "id_test",
    "semantic_ood",
    "covariate_ood",
    "head",
    "id_test_members",
    "semantic_ood_members",
    "covariate_ood_members",
    "metadata",
}


def _path_field(raw: dict, key: str, base: Path, required: bool = False):
    value = raw.get(key)
    if value is None:
        if required:
            raise ManifestError(f"manifest is missing required key {key!r}")
        return None
    if not isinstance(value, str):
        raise ManifestError(f"manifest key {key!r} must be a path string")
    return base / value


def _path_list(raw: dict, key: str, base: Path) -> tuple[Path, ...]:
    value = raw.get(key, [])
    if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
        raise ManifestError(f"manifest key {key!r} must be a list of path strings")
    return tuple(base / v for v in value)


@dataclass(frozen=True)
class DatasetManifest:
    id_train: Path
    id_test: Path
    semantic_ood: Path | None = None
    covariate_ood: tuple[Path, ...] = ()
    head: Path | None = None
    id_test_members: tuple[Path, ...] = ()
    semantic_ood_members: tuple[Path, ...] = ()
    covariate_ood_members: tuple[tuple[Path, ...], ...] = ()
    metadata: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise ManifestError(f"cannot read manifest: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ManifestError("manifest must be a JSON object")
        unknown = set(raw) - _KNOWN_KEYS
        if unknown:
            raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
        base = path.parent

        cov_members_raw = raw.get("covariate_ood_members", [])
        bad_shape = not isinstance(cov_members_raw, list) or any(
            not isinstance(row, list) or any(not isinstance(v, str) for v in row)
            for row in cov_members_raw
        )
        if bad_shape:
            raise ManifestError(
                "covariate_ood_members must be a list (per member) of path lists"
            )
        cov_members = tuple(
            tuple(base / v for v in row) for row in cov_members_raw
        )

        metadata = raw.get("metadata", {})
        if not isinstance(metadata, dict):
            raise ManifestError("metadata must be a JSON object")

        return cls(
            id_train=_path_field(raw, "id_train", base, required=True),
            id_test=_path_field(raw, "id_test", base, required=True),
            semantic_ood=_path_field(raw, "semantic_ood", base),
            covariate_ood=_path_list(raw, "covariate_ood", base),
            head=_path_field(raw, "head", base),
            id_test_members=_path_list(raw, "id_test_members", base),
            semantic_ood_members=_path_list(raw, "semantic_ood_members", base),
            covariate_ood_members=cov_members,
            metadata=dict(metadata),
        )
