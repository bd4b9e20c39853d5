"""Post-hoc OOD detection, ensemble uncertainty, and open-set evaluation."""

from .eds import (
    BadMagicError,
    EmbeddingSet,
    FormatError,
    HeaderFieldError,
    ModelHead,
    PayloadError,
    SizeMismatchError,
    TruncatedStreamError,
    read_eds,
    read_head,
    write_eds,
    write_head,
)
from .detectors import (
    DetectorConfig,
    DetectorKind,
    DetectorState,
    HeadMismatchWarning,
    fit,
    load_state,
    save_state,
    score,
    softmax,
)
from .ensemble import EnsembleBatch, epistemic_uncertainty, total_uncertainty
from .manifest import DatasetManifest, ManifestError
from .metrics import (
    DegenerateMetricError,
    PrrResult,
    RejectionCurve,
    ScoredBinarySample,
    auroc,
    auroc_from_samples,
    balanced_accuracy,
    prr,
    prr_detailed,
    rejection_curve,
)
from .harness import (
    CellResult,
    ConfigError,
    EvalReport,
    ExperimentConfig,
    OsrSplit,
    run_experiment,
)
from .report import emit_report, report_from_json
from .synthetic import generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "BadMagicError", "CellResult", "ConfigError", "DatasetManifest",
    "DegenerateMetricError", "DetectorConfig", "DetectorKind", "DetectorState",
    "EmbeddingSet", "EnsembleBatch", "EvalReport", "ExperimentConfig",
    "FormatError", "HeadMismatchWarning", "HeaderFieldError", "ManifestError",
    "ModelHead", "OsrSplit", "PayloadError", "PrrResult", "RejectionCurve",
    "ScoredBinarySample", "SizeMismatchError", "TruncatedStreamError",
    "auroc", "auroc_from_samples", "balanced_accuracy", "emit_report",
    "epistemic_uncertainty", "fit", "generate_synthetic", "load_state", "prr",
    "prr_detailed", "read_eds", "read_head", "rejection_curve",
    "report_from_json", "run_experiment", "save_state", "score", "softmax",
    "total_uncertainty", "write_eds", "write_head",
]
