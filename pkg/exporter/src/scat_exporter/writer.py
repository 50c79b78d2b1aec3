"""Standalone SCAT writer.

The format contract (shared with the analyzer side):

    magic "SCAT" | version u32 LE | metadata length u32 LE | metadata JSON
    | block count u32 LE | blocks...

    block: timestep i32 LE | layer_id u32 LE | head_count u32 LE
           | cross  f32 LE [head_count][tokens][grid_h][grid_w]
           | self   f32 LE [head_count][patches][patches]

Metadata is a UTF-8 JSON object with keys: prompt, token_strings,
subject_indices, model_id, grid {h, w}, layers, heads.
"""

from __future__ import annotations

import json
import struct
from typing import Sequence

import numpy as np

from .capture import SplitCapture
from .config import ExportError

MAGIC = b"SCAT"
VERSION = 1


def build_metadata(
    prompt: str,
    token_strings: Sequence[str],
    subject_indices: Sequence[int],
    model_id: str,
    grid: tuple[int, int],
    layers: Sequence[int],
    heads: int,
) -> str:
    return json.dumps(
        {
            "prompt": prompt,
            "token_strings": list(token_strings),
            "subject_indices": list(subject_indices),
            "model_id": model_id,
            "grid": {"h": grid[0], "w": grid[1]},
            "layers": list(layers),
            "heads": heads,
        },
        sort_keys=True,
    )


def serialize(captures: Sequence[SplitCapture], metadata_json: str) -> bytes:
    if not captures:
        raise ExportError("nothing to serialize: no captures survived filtering")
    grid = captures[0].resolution
    tokens = captures[0].cross.shape[1]
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    meta = metadata_json.encode("utf-8")
    out += struct.pack("<I", len(meta))
    out += meta
    out += struct.pack("<I", len(captures))
    for capture in captures:
        heads = capture.cross.shape[0]
        patches = grid[0] * grid[1]
        if capture.resolution != grid or capture.cross.shape[1] != tokens:
            raise ExportError("captures disagree on grid or token count")
        if capture.self_attention.shape != (heads, patches, patches):
            raise ExportError(
                f"self tensor shape {capture.self_attention.shape} is not "
                f"({heads}, {patches}, {patches})"
            )
        out += struct.pack("<iII", capture.timestep, capture.layer_id, heads)
        out += np.ascontiguousarray(capture.cross, dtype="<f4").tobytes()
        out += np.ascontiguousarray(capture.self_attention, dtype="<f4").tobytes()
    return bytes(out)
