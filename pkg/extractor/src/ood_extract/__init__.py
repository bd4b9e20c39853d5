"""Image-classifier feature extraction to binary embedding dumps."""
from .dumps import DumpError, write_eds, write_head
from .extract import ExtractionJob, ExtractionResult, extract
from .models import ExtractError, capture, find_linear_head, resolve_model

__version__ = "0.1.0"

__all__ = [
    "DumpError",
    "ExtractError",
    "ExtractionJob",
    "ExtractionResult",
    "capture",
    "extract",
    "find_linear_head",
    "resolve_model",
    "write_eds",
    "write_head",
]
