"""Attention-trace exporter for text-to-image diffusion pipelines."""

__version__ = "0.1.0"

from .backends import (
    BACKENDS,
    DiffusersBackend,
    MockMMDiTBackend,
    MockUNetBackend,
    backend_for,
)
from .capture import JointCapture, SplitCapture, split_joint_attention
from .config import ExportConfig, ExportError, ResolutionNotFoundError
from .exporter import collect_captures, export_run
from .writer import build_metadata, serialize

__all__ = [
    "__version__",
    "ExportConfig",
    "ExportError",
    "ResolutionNotFoundError",
    "SplitCapture",
    "JointCapture",
    "split_joint_attention",
    "MockUNetBackend",
    "MockMMDiTBackend",
    "DiffusersBackend",
    "BACKENDS",
    "backend_for",
    "collect_captures",
    "export_run",
    "build_metadata",
    "serialize",
]
