"""Run a capture backend and write the filtered attention maps as a trace."""

from __future__ import annotations

from pathlib import Path

from .backends import CaptureBackend, backend_for
from .capture import SplitCapture
from .config import ExportConfig, ResolutionNotFoundError
from .writer import build_metadata, serialize


def collect_captures(
    config: ExportConfig, backend: CaptureBackend
) -> list[SplitCapture]:
    kept: list[SplitCapture] = []
    seen: set[tuple[int, int]] = set()
    for capture in backend.captures(config):
        seen.add(capture.resolution)
        if capture.resolution == config.resolution:
            kept.append(capture)
    if not kept:
        raise ResolutionNotFoundError(
            config.resolution, seen | backend.available_resolutions()
        )
    return kept


def export_run(config: ExportConfig, backend: CaptureBackend | None = None) -> Path:
    """Capture one pipeline run and write the SCAT file. Returns its path."""
    backend = backend or backend_for(config)
    captures = collect_captures(config, backend)
    token_strings = backend.tokenize(config.prompt)
    metadata = build_metadata(
        prompt=config.prompt,
        token_strings=token_strings,
        subject_indices=config.subject_indices,
        model_id=config.model_id,
        grid=config.resolution,
        layers=sorted({c.layer_id for c in captures}),
        heads=max(c.cross.shape[0] for c in captures),
    )
    path = Path(config.output_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize(captures, metadata))
    return path
