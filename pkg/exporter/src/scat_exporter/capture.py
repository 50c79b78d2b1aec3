"""Capture payloads and the joint-attention split for transformer backbones."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ExportError


@dataclass(frozen=True)
class SplitCapture:
    """Cross and self attention already separated (UNet-style blocks).

    ``cross`` is [heads, tokens, h, w]; ``self_attention`` is [heads, P, P]
    with P = h * w.
    """

    timestep: int
    layer_id: int
    resolution: tuple[int, int]
    cross: np.ndarray
    self_attention: np.ndarray


@dataclass(frozen=True)
class JointCapture:
    """One joint attention matrix over the concatenated token+patch sequence
    (multimodal transformer blocks).

    ``text_ranges`` lists the (start, stop) slice of each text-encoder
    stream in the joint sequence; every stream carries the same logical
    tokens. ``image_range`` is the patch slice.
    """

    timestep: int
    layer_id: int
    resolution: tuple[int, int]
    joint: np.ndarray
    text_ranges: tuple[tuple[int, int], ...]
    image_range: tuple[int, int]


def split_joint_attention(capture: JointCapture) -> SplitCapture:
    """Carve a joint attention matrix into cross and self parts.

    The image-to-text block becomes the per-token cross maps; streams from
    multiple text encoders are merged by elementwise maximum. The
    image-to-image block becomes the self-attention field with rows
    renormalized to sum to 1, since a row of the joint softmax spreads its
    mass over text positions too.
    """
    h, w = capture.resolution
    patches = h * w
    img_lo, img_hi = capture.image_range
    if img_hi - img_lo != patches:
        raise ExportError(
            f"image range {capture.image_range} does not cover {patches} patches"
        )
    heads = capture.joint.shape[0]
    token_count = capture.text_ranges[0][1] - capture.text_ranges[0][0]
    for lo, hi in capture.text_ranges:
        if hi - lo != token_count:
            raise ExportError("text-encoder streams disagree on token count")

    image_rows = capture.joint[:, img_lo:img_hi, :]
    merged = None
    for lo, hi in capture.text_ranges:
        image_text = image_rows[:, :, lo:hi]  # [heads, P, T]
        merged = image_text if merged is None else np.maximum(merged, image_text)
    cross = merged.transpose(0, 2, 1).reshape(heads, token_count, h, w)

    image_image = image_rows[:, :, img_lo:img_hi].astype(np.float64)
    row_sums = image_image.sum(axis=2, keepdims=True)
    if (row_sums <= 0).any():
        raise ExportError("image-image attention has an all-zero row")
    self_attention = (image_image / row_sums).astype(np.float32)

    return SplitCapture(
        timestep=capture.timestep,
        layer_id=capture.layer_id,
        resolution=capture.resolution,
        cross=cross.astype(np.float32),
        self_attention=self_attention,
    )
