"""Attention-map primitives: computation, normalization, masking, aggregation, merging.

All tensors live on CPU. Operations are pure: they never mutate their inputs
and return fresh values, so everything here is safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import (
    ConfigurationError,
    DegenerateMapError,
    DegenerateMaskError,
    NumericError,
    ShapeError,
)

DEFAULT_OTSU_BINS = 256

# Maps whose value range falls below this are treated as constant.
DEGENERATE_RANGE = 1e-8

__all__ = [
    "DEFAULT_OTSU_BINS",
    "PatchGrid",
    "CrossAttentionMap",
    "SelfAttentionField",
    "SubjectMask",
    "AggregatedSelfMap",
    "AttentionRecord",
    "compute_attention",
    "average_heads_layers",
    "normalize_map",
    "otsu_threshold",
    "subject_mask",
    "aggregate_self_attention",
    "merge_dual_encoder",
]


def _check_finite(name: str, values: torch.Tensor) -> None:
    if not torch.isfinite(values).all():
        raise NumericError(f"{name} contains non-finite values")


def _argmax_flat(values: torch.Tensor) -> int:
    """Lowest flat index among the maxima (deterministic tie-break)."""
    flat = values.detach().reshape(-1).cpu().numpy()
    return int(np.argmax(flat))


@dataclass(frozen=True)
class PatchGrid:
    """Spatial resolution of an attention map, in patches."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ShapeError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def patches(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class CrossAttentionMap:
    """Spatial attention of one prompt token over all image patches.

    ``values`` has shape [height, width] and is non-negative. The
    ``normalized`` flag asserts that the entries sum to 1.
    """

    token_index: int
    grid: PatchGrid
    values: torch.Tensor
    normalized: bool = False

    def __post_init__(self):
        if tuple(self.values.shape) != (self.grid.height, self.grid.width):
            raise ShapeError(
                f"cross map shape {tuple(self.values.shape)} does not match grid "
                f"{self.grid.height}x{self.grid.width}"
            )
        _check_finite("cross-attention map", self.values)
        if (self.values < 0).any():
            raise NumericError("cross-attention map has negative entries")
        if self.normalized:
            total = float(self.values.detach().sum())
            if abs(total - 1.0) > 1e-5:
                raise NumericError(f"map flagged normalized but sums to {total!r}")

    @property
    def flat(self) -> torch.Tensor:
        return self.values.reshape(-1)


@dataclass(frozen=True)
class SelfAttentionField:
    """Per-patch self-attention: row p is the attention map of patch p.

    ``values`` has shape [P, P] with row-stochastic rows (each sums to 1).
    """

    grid: PatchGrid
    values: torch.Tensor

    def __post_init__(self):
        p = self.grid.patches
        if tuple(self.values.shape) != (p, p):
            raise ShapeError(
                f"self-attention field shape {tuple(self.values.shape)} does not match "
                f"{p} patches"
            )
        _check_finite("self-attention field", self.values)
        if (self.values < 0).any():
            raise NumericError("self-attention field has negative entries")
        row_sums = self.values.detach().sum(dim=-1)
        worst = float((row_sums - 1.0).abs().max())
        if worst > 1e-5:
            raise NumericError(
                f"self-attention rows must sum to 1 (worst deviation {worst:.3e})"
            )


@dataclass(frozen=True)
class SubjectMask:
    """Boolean selection of patches with relatively high cross-attention."""

    grid: PatchGrid
    selected: torch.Tensor
    threshold: float

    def __post_init__(self):
        if tuple(self.selected.shape) != (self.grid.patches,):
            raise ShapeError("mask length must equal the patch count")
        if self.selected.dtype != torch.bool:
            raise ShapeError("mask must be a boolean tensor")
        if not bool(self.selected.any()):
            raise DegenerateMaskError("subject mask selects no patches")

    @property
    def count(self) -> int:
        return int(self.selected.sum())


@dataclass(frozen=True)
class AggregatedSelfMap:
    """Cross-attention-weighted average of self-attention rows for one subject.

    ``values`` is flat with shape [P]; it is a convex combination of
    row-stochastic rows, so it sums to 1 whenever its sources do.
    """

    subject_index: int
    grid: PatchGrid
    values: torch.Tensor

    def __post_init__(self):
        if tuple(self.values.shape) != (self.grid.patches,):
            raise ShapeError("aggregated map must be flat with one entry per patch")
        _check_finite("aggregated self-attention map", self.values)
        if (self.values < -1e-12).any():
            raise NumericError("aggregated self-attention map has negative entries")


@dataclass(frozen=True)
class AttentionRecord:
    """One denoiser evaluation's attention state at a single layer.

    ``cross`` has shape [heads, tokens, height, width]; ``self_attention``
    has shape [heads, P, P]. Heads are kept explicit so producers can defer
    all averaging to :func:`average_heads_layers`.
    """

    timestep: int
    layer_id: int
    grid: PatchGrid
    cross: torch.Tensor
    self_attention: torch.Tensor
    token_strings: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        h, w, p = self.grid.height, self.grid.width, self.grid.patches
        if self.cross.ndim != 4 or tuple(self.cross.shape[2:]) != (h, w):
            raise ShapeError(
                f"cross tensor must be [heads, tokens, {h}, {w}], got {tuple(self.cross.shape)}"
            )
        if tuple(self.self_attention.shape) != (self.cross.shape[0], p, p):
            raise ShapeError(
                f"self tensor must be [heads, {p}, {p}], got {tuple(self.self_attention.shape)}"
            )
        if self.token_strings and len(self.token_strings) != self.cross.shape[1]:
            raise ShapeError(
                f"{len(self.token_strings)} token strings for {self.cross.shape[1]} token maps"
            )

    @property
    def head_count(self) -> int:
        return int(self.cross.shape[0])

    @property
    def token_count(self) -> int:
        return int(self.cross.shape[1])

    def cross_map(self, token_index: int, head: int = 0) -> CrossAttentionMap:
        return CrossAttentionMap(
            token_index=token_index, grid=self.grid, values=self.cross[head, token_index]
        )

    def self_field(self, head: int = 0) -> SelfAttentionField:
        return SelfAttentionField(grid=self.grid, values=self.self_attention[head])


def compute_attention(
    queries: torch.Tensor, keys: torch.Tensor, softmax_axis: str = "per-query"
) -> torch.Tensor:
    """Scaled dot-product attention weights, Softmax(Q Kᵀ / sqrt(d)).

    ``softmax_axis`` selects which slices normalize to 1: "per-query" softmaxes
    each row (over keys), "per-key" softmaxes each column (over queries).
    """
    if queries.ndim != 2 or keys.ndim != 2:
        raise ShapeError("queries and keys must be rank-2 [n, d]")
    if queries.shape[1] != keys.shape[1]:
        raise ShapeError(
            f"query width {queries.shape[1]} does not match key width {keys.shape[1]}"
        )
    if queries.shape[1] < 1:
        raise ShapeError("attention width d must be >= 1")
    _check_finite("queries", queries)
    _check_finite("keys", keys)
    logits = queries @ keys.T / np.sqrt(queries.shape[1])
    if softmax_axis == "per-query":
        return torch.softmax(logits, dim=-1)
    if softmax_axis == "per-key":
        return torch.softmax(logits, dim=0)
    raise ConfigurationError(f"unknown softmax_axis {softmax_axis!r}")


def average_heads_layers(
    records: list[AttentionRecord], layer_filter: set[int] | None = None
) -> AttentionRecord:
    """Mean attention record over heads, then over the selected layers.

    All selected records must share grid and token count. Accumulation is in
    float64. The result carries a single head.
    """
    if not records:
        raise ConfigurationError("no records to average")
    if layer_filter is not None:
        selected = [r for r in records if r.layer_id in layer_filter]
        if not selected:
            present = sorted({r.layer_id for r in records})
            raise ConfigurationError(
                f"layer filter {sorted(layer_filter)} matches none of layers {present}"
            )
    else:
        selected = list(records)
    grid = selected[0].grid
    tokens = selected[0].token_count
    for r in selected[1:]:
        if r.grid != grid or r.token_count != tokens:
            raise ShapeError("records disagree on grid or token count")
    cross = torch.stack(
        [r.cross.to(torch.float64).mean(dim=0) for r in selected]
    ).mean(dim=0)
    selfatt = torch.stack(
        [r.self_attention.to(torch.float64).mean(dim=0) for r in selected]
    ).mean(dim=0)
    return AttentionRecord(
        timestep=selected[0].timestep,
        layer_id=min(r.layer_id for r in selected),
        grid=grid,
        cross=cross.unsqueeze(0),
        self_attention=selfatt.unsqueeze(0),
        token_strings=selected[0].token_strings,
    )


def normalize_map(cross: CrossAttentionMap) -> CrossAttentionMap:
    """Rescale a map so its entries sum to 1. Preserves argmax and ordering."""
    total = cross.values.sum()
    if float(total.detach()) <= 0.0:
        raise DegenerateMapError(
            f"cannot normalize all-zero map for token {cross.token_index}"
        )
    return replace(cross, values=cross.values / total, normalized=True)


def otsu_threshold(
    cross: CrossAttentionMap, bins: int = DEFAULT_OTSU_BINS
) -> SubjectMask:
    """Histogram threshold maximizing between-class variance; mask of patches above it.

    The histogram uses ``bins`` uniform bins over [min, max] of the map. The
    threshold is reported as the winning bin's upper edge and selection is
    strictly above it. Ties prefer the lowest bin. Raises
    :class:`DegenerateMapError` when the map range is below ``DEGENERATE_RANGE``.
    """
    if bins < 2:
        raise ConfigurationError(f"need at least 2 bins, got {bins}")
    values = cross.values.detach().to(torch.float64).reshape(-1)
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo < DEGENERATE_RANGE:
        raise DegenerateMapError(
            f"map for token {cross.token_index} is (near-)constant; no threshold exists"
        )
    idx = torch.clamp(((values - lo) / (hi - lo) * bins).floor().long(), max=bins - 1)
    counts = torch.bincount(idx, minlength=bins).to(torch.float64)
    levels = torch.arange(bins, dtype=torch.float64)

    total = counts.sum()
    weight_lo = counts.cumsum(0)
    weight_hi = total - weight_lo
    sum_lo = (counts * levels).cumsum(0)
    mean_lo = sum_lo / weight_lo.clamp(min=1)
    mean_hi = (sum_lo[-1] - sum_lo) / weight_hi.clamp(min=1)
    variance = weight_lo * weight_hi * (mean_lo - mean_hi) ** 2
    variance = torch.where(
        (weight_lo > 0) & (weight_hi > 0), variance, torch.zeros((), dtype=torch.float64)
    )
    best_bin = _argmax_flat(variance)

    threshold = lo + (best_bin + 1) * (hi - lo) / bins
    selected = cross.values.detach().reshape(-1) > threshold
    if not bool(selected.any()):
        # Unreachable for well-separated histograms; keep the contract anyway.
        selected = torch.zeros(cross.grid.patches, dtype=torch.bool)
        selected[_argmax_flat(cross.values)] = True
    return SubjectMask(grid=cross.grid, selected=selected, threshold=float(threshold))


def subject_mask(cross: CrossAttentionMap, bins: int = DEFAULT_OTSU_BINS) -> SubjectMask:
    """Otsu mask with a degenerate fallback to the argmax singleton.

    Constant maps have no usable histogram split; falling back to the single
    highest-response patch keeps downstream aggregation well-defined.
    """
    try:
        return otsu_threshold(cross, bins=bins)
    except DegenerateMapError:
        selected = torch.zeros(cross.grid.patches, dtype=torch.bool)
        selected[_argmax_flat(cross.values)] = True
        return SubjectMask(
            grid=cross.grid, selected=selected, threshold=float(cross.values.max())
        )


def aggregate_self_attention(
    cross: CrossAttentionMap, selfatt: SelfAttentionField, mask: SubjectMask
) -> AggregatedSelfMap:
    """Weighted mean of the masked patches' self-attention rows.

    Weights are the cross-attention values of the masked patches, so the
    result is a convex combination of self-attention rows:
    out[p] = sum_m cross[m] * self[m][p] / sum_m cross[m].
    """
    if cross.grid != selfatt.grid or cross.grid != mask.grid:
        raise ShapeError("cross map, self field, and mask must share one grid")
    weights = cross.flat[mask.selected]
    if weights.numel() == 0:
        raise DegenerateMaskError("mask selects no patches")
    denom = weights.sum()
    if float(denom.detach()) <= 0.0:
        raise DegenerateMaskError(
            f"masked cross-attention weight for token {cross.token_index} sums to zero"
        )
    rows = selfatt.values[mask.selected]
    values = (weights.unsqueeze(1) * rows).sum(dim=0) / denom
    return AggregatedSelfMap(subject_index=cross.token_index, grid=cross.grid, values=values)


def merge_dual_encoder(
    map_a: CrossAttentionMap, map_b: CrossAttentionMap
) -> CrossAttentionMap:
    """Elementwise maximum of two maps for the same token (dual text encoders)."""
    if map_a.grid != map_b.grid:
        raise ShapeError("cannot merge maps with different grids")
    if map_a.token_index != map_b.token_index:
        raise ShapeError(
            f"cannot merge maps for different tokens "
            f"({map_a.token_index} vs {map_b.token_index})"
        )
    return CrossAttentionMap(
        token_index=map_a.token_index,
        grid=map_a.grid,
        values=torch.maximum(map_a.values, map_b.values),
        normalized=False,
    )
