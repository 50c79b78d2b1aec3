"""Guidance losses over attention maps.

Two signals drive latent updates: a response score that penalizes subjects
whose strongest cross-attention is weak (subject neglect), and a self-cross
overlap score that penalizes each subject's aggregated self-attention for
landing on other subjects' cross-attention (subject mixing). Every function
here is differentiable through torch, so the same code serves both online
gradient computation and offline trace analysis.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence

import torch

from .attention import (
    DEFAULT_OTSU_BINS,
    AggregatedSelfMap,
    AttentionRecord,
    CrossAttentionMap,
    SelfAttentionField,
    aggregate_self_attention,
    average_heads_layers,
    normalize_map,
    subject_mask,
)
from .errors import ConfigurationError, ShapeError

__all__ = [
    "SubjectSet",
    "GuidanceLosses",
    "cross_attn_response_score",
    "pairwise_overlap",
    "self_cross_score",
    "self_self_overlap",
    "total_loss",
    "guidance_from_maps",
    "evaluate_records",
]


@dataclass(frozen=True)
class SubjectSet:
    """Ordered prompt-token positions of the subjects under guidance."""

    indices: tuple[int, ...]

    def __post_init__(self):
        if not self.indices:
            raise ConfigurationError("subject set is empty")
        if len(set(self.indices)) != len(self.indices):
            raise ConfigurationError(f"subject indices repeat: {self.indices}")
        if any(i < 0 for i in self.indices):
            raise ConfigurationError(f"subject indices must be non-negative: {self.indices}")

    @property
    def size(self) -> int:
        return len(self.indices)

    def require_pairs(self) -> None:
        if self.size < 2:
            raise ConfigurationError(
                f"self-cross overlap needs at least 2 subjects, got {self.size}"
            )


@dataclass(frozen=True)
class GuidanceLosses:
    """All guidance losses of one denoiser evaluation.

    ``pairwise`` maps unordered subject pairs (stored as sorted tuples) to
    their overlap value; use :meth:`overlap` for order-free lookup.
    """

    s_cross_attn: float
    s_self_cross: float
    pairwise: Mapping[tuple[int, int], float]
    total: float
    lam: float

    def __post_init__(self):
        expected = self.s_self_cross + self.lam * self.s_cross_attn
        if abs(self.total - expected) > 1e-6:
            raise ConfigurationError(
                f"total {self.total!r} inconsistent with "
                f"self_cross + lam * cross_attn = {expected!r}"
            )

    def overlap(self, i: int, j: int) -> float:
        return self.pairwise[(min(i, j), max(i, j))]

    def exceeds(self, tau_cross: float, tau_self_cross: float) -> bool:
        return self.s_cross_attn > tau_cross or self.s_self_cross > tau_self_cross


def _require_same_grid(*maps) -> None:
    grid = maps[0].grid
    for m in maps[1:]:
        if m.grid != grid:
            raise ShapeError("maps must share one patch grid")


def cross_attn_response_score(
    cross_maps: Sequence[CrossAttentionMap], subjects: SubjectSet
) -> torch.Tensor:
    """Worst-case 1 - max(map) across subjects; high when some subject is neglected."""
    if subjects.size == 0 or not cross_maps:
        raise ConfigurationError("response score needs at least one subject map")
    if len(cross_maps) != subjects.size:
        raise ConfigurationError(
            f"{len(cross_maps)} maps supplied for {subjects.size} subjects"
        )
    _require_same_grid(*cross_maps)
    per_subject = torch.stack([1.0 - torch.amax(m.values) for m in cross_maps])
    return torch.amax(per_subject)


def pairwise_overlap(
    agg_i: AggregatedSelfMap,
    cross_i: CrossAttentionMap,
    agg_j: AggregatedSelfMap,
    cross_j: CrossAttentionMap,
) -> torch.Tensor:
    """Overlap between two subjects: min-sum of each one's aggregated
    self-attention against the other's cross-attention.

    Symmetric under swapping the subjects (bit-identical). Expects normalized
    cross maps; the result then lies in [0, 2].
    """
    _require_same_grid(agg_i, cross_i, agg_j, cross_j)
    return (
        torch.minimum(agg_i.values, cross_j.flat).sum()
        + torch.minimum(cross_i.flat, agg_j.values).sum()
    )


def self_cross_score(
    per_subject: Sequence[tuple[AggregatedSelfMap, CrossAttentionMap]],
    subjects: SubjectSet,
) -> tuple[torch.Tensor, dict[tuple[int, int], torch.Tensor]]:
    """Mean pairwise overlap over all unordered subject pairs.

    Returns the score and the pairwise table keyed by sorted subject-index
    pairs. Requires at least two subjects.
    """
    subjects.require_pairs()
    if len(per_subject) != subjects.size:
        raise ConfigurationError(
            f"{len(per_subject)} map pairs supplied for {subjects.size} subjects"
        )
    pairs: dict[tuple[int, int], torch.Tensor] = {}
    terms = []
    for a, b in combinations(range(subjects.size), 2):
        agg_a, cross_a = per_subject[a]
        agg_b, cross_b = per_subject[b]
        g = pairwise_overlap(agg_a, cross_a, agg_b, cross_b)
        i, j = subjects.indices[a], subjects.indices[b]
        pairs[(min(i, j), max(i, j))] = g
        terms.append(g)
    score = torch.stack(terms).sum() / len(terms)
    return score, pairs


def self_self_overlap(agg_i: AggregatedSelfMap, agg_j: AggregatedSelfMap) -> torch.Tensor:
    """Min-sum between two aggregated self-attention maps.

    Ablation-only alternative overlap; tends to split backgrounds into
    disjoint halves, so the default pipeline never uses it.
    """
    _require_same_grid(agg_i, agg_j)
    return torch.minimum(agg_i.values, agg_j.values).sum()


def total_loss(
    s_self_cross: float | torch.Tensor,
    s_cross_attn: float | torch.Tensor,
    lam: float,
    pairwise: Mapping[tuple[int, int], float | torch.Tensor] | None = None,
) -> GuidanceLosses:
    """Combine the two scores into the weighted total."""

    def scalar(value) -> float:
        return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)

    s_sc = scalar(s_self_cross)
    s_ca = scalar(s_cross_attn)
    table = {k: scalar(v) for k, v in (pairwise or {}).items()}
    return GuidanceLosses(
        s_cross_attn=s_ca,
        s_self_cross=s_sc,
        pairwise=table,
        total=s_sc + lam * s_ca,
        lam=lam,
    )


def guidance_from_maps(
    cross_maps: Sequence[CrossAttentionMap],
    self_field: SelfAttentionField,
    subjects: SubjectSet,
    lam: float,
    bins: int = DEFAULT_OTSU_BINS,
) -> tuple[torch.Tensor, GuidanceLosses]:
    """Full loss pipeline from raw per-subject cross maps and a self field.

    Per subject: normalize the cross map, mask its high-response patches,
    aggregate the masked self-attention rows, then score. Mask selection is
    detached from any gradient graph; everything else differentiates through.
    Returns the total as a live tensor plus the float summary.
    """
    if len(cross_maps) != subjects.size:
        raise ConfigurationError(
            f"{len(cross_maps)} cross maps supplied for {subjects.size} subjects"
        )
    prepared: list[tuple[AggregatedSelfMap, CrossAttentionMap]] = []
    for m in cross_maps:
        normalized = normalize_map(m)
        mask = subject_mask(normalized, bins=bins)
        agg = aggregate_self_attention(normalized, self_field, mask)
        prepared.append((agg, normalized))
    s_ca = cross_attn_response_score([nm for _, nm in prepared], subjects)
    s_sc, pair_table = self_cross_score(prepared, subjects)
    total = s_sc + lam * s_ca
    losses = total_loss(s_sc, s_ca, lam, pairwise=pair_table)
    return total, losses


def evaluate_records(
    records: Sequence[AttentionRecord],
    subjects: SubjectSet,
    lam: float,
    layer_filter: set[int] | None = None,
    bins: int = DEFAULT_OTSU_BINS,
) -> GuidanceLosses:
    """Guidance losses for one evaluation stored as attention records.

    Heads are averaged first, then the selected layers; accumulation runs in
    float64 regardless of the records' storage precision. This is the exact
    code path the sampler uses when recording losses, so offline analysis of
    a written trace reproduces the recorded values.
    """
    merged = average_heads_layers(list(records), layer_filter)
    for k in subjects.indices:
        if k >= merged.token_count:
            raise ConfigurationError(
                f"subject index {k} out of range for {merged.token_count} tokens"
            )
    cross_maps = [merged.cross_map(k) for k in subjects.indices]
    _, losses = guidance_from_maps(
        cross_maps, merged.self_field(), subjects, lam, bins=bins
    )
    return losses
