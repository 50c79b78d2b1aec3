"""SCAT attention-trace files: a small binary container for attention records.

Layout (all integers little-endian):

    magic "SCAT" | version u32 | metadata length u32 | metadata JSON (UTF-8)
    | block count u32 | blocks...

    block: timestep i32 | layer_id u32 | head_count u32
           | cross  f32[head_count][tokens][grid_h][grid_w]
           | self   f32[head_count][patches][patches]

Token count and grid come from the metadata and are shared by every block.
Floats are stored exactly as float32, so a write/read round-trip is
bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .attention import (
    DEFAULT_OTSU_BINS,
    AttentionRecord,
    PatchGrid,
    average_heads_layers,
    normalize_map,
    subject_mask,
)
from .errors import (
    ConfigurationError,
    SelfCrossError,
    ShapeError,
    TraceCountError,
    TraceFormatError,
    TraceMagicError,
    TraceTruncationError,
    TraceVersionError,
)
from .guidance import GuidanceLosses, SubjectSet, evaluate_records

MAGIC = b"SCAT"
VERSION = 1

__all__ = [
    "MAGIC",
    "VERSION",
    "TraceMetadata",
    "AnalysisRow",
    "write_trace",
    "read_trace",
    "analyze_trace",
]


@dataclass(frozen=True)
class TraceMetadata:
    """Header metadata describing the run a trace was captured from."""

    prompt: str
    token_strings: tuple[str, ...]
    subject_indices: tuple[int, ...]
    model_id: str
    grid: PatchGrid
    layers: tuple[int, ...]
    heads: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "prompt": self.prompt,
                "token_strings": list(self.token_strings),
                "subject_indices": list(self.subject_indices),
                "model_id": self.model_id,
                "grid": {"h": self.grid.height, "w": self.grid.width},
                "layers": list(self.layers),
                "heads": self.heads,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TraceMetadata":
        try:
            raw = json.loads(text)
            return cls(
                prompt=raw["prompt"],
                token_strings=tuple(raw["token_strings"]),
                subject_indices=tuple(raw["subject_indices"]),
                model_id=raw["model_id"],
                grid=PatchGrid(raw["grid"]["h"], raw["grid"]["w"]),
                layers=tuple(raw["layers"]),
                heads=int(raw["heads"]),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise TraceFormatError(f"unreadable trace metadata: {exc}") from exc

    @classmethod
    def for_records(
        cls,
        records: Sequence[AttentionRecord],
        prompt: str = "",
        subject_indices: tuple[int, ...] = (),
        model_id: str = "toy-denoiser",
    ) -> "TraceMetadata":
        first = records[0]
        return cls(
            prompt=prompt,
            token_strings=first.token_strings,
            subject_indices=tuple(subject_indices),
            model_id=model_id,
            grid=first.grid,
            layers=tuple(sorted({r.layer_id for r in records})),
            heads=max(r.head_count for r in records),
        )


def _f32_bytes(tensor: torch.Tensor) -> bytes:
    array = tensor.detach().to(torch.float32).contiguous().numpy()
    return array.astype("<f4", copy=False).tobytes()


def write_trace(records: Sequence[AttentionRecord], metadata: TraceMetadata) -> bytes:
    """Serialize records to SCAT bytes. Records must be shape-consistent."""
    if not records:
        raise TraceFormatError("refusing to write a trace with no records")
    grid = metadata.grid
    tokens = len(metadata.token_strings)
    for i, record in enumerate(records):
        if record.grid != grid:
            raise TraceFormatError(f"record {i} grid {record.grid} != metadata grid {grid}")
        if record.token_count != tokens:
            raise TraceFormatError(
                f"record {i} has {record.token_count} tokens, metadata says {tokens}"
            )
    meta_bytes = metadata.to_json().encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<I", len(records))
    for record in records:
        out += struct.pack("<iII", record.timestep, record.layer_id, record.head_count)
        out += _f32_bytes(record.cross)
        out += _f32_bytes(record.self_attention)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise TraceTruncationError(
                f"stream ends inside {what}: wanted {n} bytes, "
                f"{len(self.data) - self.offset} left",
                offset=self.offset,
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def i32(self, what: str) -> int:
        return struct.unpack("<i", self.take(4, what))[0]

    def f32_tensor(self, shape: tuple[int, ...], what: str) -> torch.Tensor:
        count = int(np.prod(shape))
        raw = self.take(4 * count, what)
        array = np.frombuffer(raw, dtype="<f4").reshape(shape)
        return torch.from_numpy(array.copy())


def read_trace(data: bytes) -> tuple[TraceMetadata, list[AttentionRecord]]:
    """Parse SCAT bytes; the exact inverse of :func:`write_trace`."""
    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise TraceMagicError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = reader.u32("version")
    if version != VERSION:
        raise TraceVersionError(f"unsupported trace version {version}", offset=4)
    meta_len = reader.u32("metadata length")
    metadata = TraceMetadata.from_json(reader.take(meta_len, "metadata").decode("utf-8"))
    declared = reader.u32("block count")
    grid = metadata.grid
    tokens = len(metadata.token_strings)
    records: list[AttentionRecord] = []
    for index in range(declared):
        timestep = reader.i32(f"block {index} header")
        layer_id = reader.u32(f"block {index} header")
        head_count = reader.u32(f"block {index} header")
        if head_count < 1:
            raise TraceFormatError(
                f"block {index} declares {head_count} heads", offset=reader.offset
            )
        cross = reader.f32_tensor(
            (head_count, tokens, grid.height, grid.width), f"block {index} cross tensor"
        )
        selfatt = reader.f32_tensor(
            (head_count, grid.patches, grid.patches), f"block {index} self tensor"
        )
        try:
            records.append(
                AttentionRecord(
                    timestep=timestep,
                    layer_id=layer_id,
                    grid=grid,
                    cross=cross,
                    self_attention=selfatt,
                    token_strings=metadata.token_strings,
                )
            )
        except ShapeError as exc:
            raise TraceFormatError(f"block {index}: {exc}", offset=reader.offset) from exc
    if reader.offset != len(data):
        raise TraceCountError(
            f"{len(data) - reader.offset} trailing bytes after {declared} declared blocks",
            offset=reader.offset,
        )
    return metadata, records


@dataclass(frozen=True)
class SubjectSummary:
    """Per-subject map diagnostics for one analyzed record."""

    token_index: int
    max_value: float
    otsu_threshold: float
    mask_size: int


@dataclass(frozen=True)
class AnalysisRow:
    """Losses (or the failure) for one record or record group."""

    index: int
    timestep: int
    layer_id: int
    losses: GuidanceLosses | None
    subject_summaries: tuple[SubjectSummary, ...] = ()
    error: str | None = None


def _summaries(
    records: Sequence[AttentionRecord], subjects: SubjectSet, bins: int
) -> tuple[SubjectSummary, ...]:
    merged = average_heads_layers(list(records))
    out = []
    for k in subjects.indices:
        normalized = normalize_map(merged.cross_map(k))
        mask = subject_mask(normalized, bins=bins)
        out.append(
            SubjectSummary(
                token_index=k,
                max_value=float(normalized.values.max()),
                otsu_threshold=mask.threshold,
                mask_size=mask.count,
            )
        )
    return tuple(out)


def analyze_trace(
    records: Sequence[AttentionRecord],
    subjects: SubjectSet,
    lam: float = 1.0,
    layer_filter: set[int] | None = None,
    bins: int = DEFAULT_OTSU_BINS,
    group_layers: bool = False,
) -> list[AnalysisRow]:
    """Recompute guidance losses for every record of a trace.

    By default each record is analyzed on its own (heads averaged), matching
    how the sampler records one evaluation per block. With ``group_layers``,
    consecutive records sharing a timestep are averaged together first, which
    is the right mode for real-model exports carrying one block per layer.
    Degenerate records produce an error row; analysis continues.
    """
    groups: list[list[AttentionRecord]] = []
    if group_layers:
        for record in records:
            if groups and groups[-1][0].timestep == record.timestep:
                groups[-1].append(record)
            else:
                groups.append([record])
    else:
        groups = [[r] for r in records]

    rows: list[AnalysisRow] = []
    for index, group in enumerate(groups):
        timestep = group[0].timestep
        layer_id = min(r.layer_id for r in group)
        try:
            selected = group
            if layer_filter is not None:
                selected = [r for r in group if r.layer_id in layer_filter]
                if not selected:
                    raise ConfigurationError(
                        f"no layer of {sorted({r.layer_id for r in group})} "
                        f"matches filter {sorted(layer_filter)}"
                    )
            losses = evaluate_records(selected, subjects, lam, bins=bins)
            rows.append(
                AnalysisRow(
                    index=index,
                    timestep=timestep,
                    layer_id=layer_id,
                    losses=losses,
                    subject_summaries=_summaries(selected, subjects, bins),
                )
            )
        except SelfCrossError as exc:
            rows.append(
                AnalysisRow(
                    index=index,
                    timestep=timestep,
                    layer_id=layer_id,
                    losses=None,
                    error=str(exc),
                )
            )
    return rows
