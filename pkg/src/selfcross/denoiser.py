"""A desk-scale differentiable denoiser exposing its attention maps.

One self-attention block feeds one cross-attention block over a small latent
(8x8 patches x 8 channels by default), with synthetic token embeddings in
place of a text encoder. Weights are generated from a counter-based Philox
stream, so identical seeds give bit-identical parameters on any platform.
The point is not image quality: the attention maps and the guidance losses
computed from them are exact, differentiable, and cheap enough to verify
against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .attention import (
    DEFAULT_OTSU_BINS,
    AttentionRecord,
    CrossAttentionMap,
    PatchGrid,
    SelfAttentionField,
    compute_attention,
)
from .errors import ConfigurationError, ShapeError
from .guidance import GuidanceLosses, SubjectSet, evaluate_records, guidance_from_maps

__all__ = [
    "LatentState",
    "DenoiserParams",
    "ForwardOutput",
    "GuidanceEvaluation",
    "philox_stream",
    "forward",
    "evaluate_guidance",
    "loss_grad_wrt_latent",
]

# Stream tags keep weight draws and run-noise draws decorrelated even when
# a model seed equals a run seed.
STREAM_PARAMS = 1
STREAM_NOISE = 2


def philox_stream(seed: int, tag: int) -> np.random.Generator:
    """Counter-based RNG stream for (seed, purpose-tag)."""
    if seed < 0:
        raise ConfigurationError(f"seeds must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(key=np.array([seed, tag], dtype=np.uint64)))


@dataclass(frozen=True)
class LatentState:
    """Latent code at one point of the reverse process, flattened to [P, channels]."""

    grid: PatchGrid
    values: torch.Tensor
    timestep: int = 0

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.patches:
            raise ShapeError(
                f"latent must be [{self.grid.patches}, channels], got {tuple(self.values.shape)}"
            )
        if not torch.isfinite(self.values).all():
            raise ShapeError("latent contains non-finite values")

    @property
    def channels(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class DenoiserParams:
    """Fixed projection weights and synthetic token embeddings.

    Build with :meth:`create`; weights are drawn uniform in
    [-0.5, 0.5] / sqrt(attn_dim) from the Philox params stream in a fixed
    order (token embeddings, null embeddings, self-attention query/key/value,
    cross-attention query/key/value, output head).
    """

    seed: int
    grid: PatchGrid
    channels: int
    attn_dim: int
    token_strings: tuple[str, ...]
    softmax_axis: str
    token_embeddings: torch.Tensor
    null_embeddings: torch.Tensor
    w_query_self: torch.Tensor
    w_key_self: torch.Tensor
    w_value_self: torch.Tensor
    w_query_cross: torch.Tensor
    w_key_cross: torch.Tensor
    w_value_cross: torch.Tensor
    w_out: torch.Tensor

    @property
    def token_count(self) -> int:
        return len(self.token_strings)

    @classmethod
    def create(
        cls,
        seed: int,
        token_strings: tuple[str, ...] | list[str],
        grid: PatchGrid = PatchGrid(8, 8),
        channels: int = 8,
        attn_dim: int = 8,
        softmax_axis: str = "per-key",
    ) -> "DenoiserParams":
        tokens = tuple(token_strings)
        if len(tokens) < 2:
            raise ConfigurationError("need at least two prompt tokens")
        if softmax_axis not in ("per-key", "per-query"):
            raise ConfigurationError(f"unknown softmax_axis {softmax_axis!r}")
        rng = philox_stream(seed, STREAM_PARAMS)
        scale = 1.0 / math.sqrt(attn_dim)

        def draw(*shape: int) -> torch.Tensor:
            return torch.from_numpy(rng.uniform(-0.5, 0.5, shape) * scale)

        k, c, d = len(tokens), channels, attn_dim
        return cls(
            seed=seed,
            grid=grid,
            channels=channels,
            attn_dim=attn_dim,
            token_strings=tokens,
            softmax_axis=softmax_axis,
            token_embeddings=draw(k, d),
            null_embeddings=draw(k, d),
            w_query_self=draw(c, d),
            w_key_self=draw(c, d),
            w_value_self=draw(c, c),
            w_query_cross=draw(d, d),
            w_key_cross=draw(c, d),
            w_value_cross=draw(d, c),
            w_out=draw(c, c),
        )

    def initial_latent(self, seed: int, timestep: int = 0) -> LatentState:
        """Seeded standard-Gaussian latent from the noise stream."""
        rng = philox_stream(seed, STREAM_NOISE)
        values = torch.from_numpy(rng.standard_normal((self.grid.patches, self.channels)))
        return LatentState(grid=self.grid, values=values, timestep=timestep)


@dataclass(frozen=True)
class ForwardOutput:
    noise_prediction: torch.Tensor
    record: AttentionRecord


@dataclass(frozen=True)
class GuidanceEvaluation:
    """One loss+gradient evaluation of the denoiser at a latent.

    ``losses`` and ``gradient`` come from the full-precision graph;
    ``record_losses`` are recomputed from the float32 archival maps in
    ``record`` so that offline analysis of a written trace reproduces them
    bit-exactly.
    """

    losses: GuidanceLosses
    gradient: torch.Tensor
    record: AttentionRecord
    record_losses: GuidanceLosses


def _check_compatible(latent: LatentState, params: DenoiserParams) -> None:
    if latent.grid != params.grid:
        raise ShapeError(
            f"latent grid {latent.grid} does not match denoiser grid {params.grid}"
        )
    if latent.channels != params.channels:
        raise ShapeError(
            f"latent has {latent.channels} channels, denoiser expects {params.channels}"
        )


def _single_pass(
    z: torch.Tensor, params: DenoiserParams, embeddings: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Self-attention block, then cross-attention block, then output head.

    Returns (noise prediction [P, C], cross weights [tokens, P],
    self weights [P, P]).
    """
    self_weights = compute_attention(
        z @ params.w_query_self, z @ params.w_key_self, "per-query"
    )
    z = z + self_weights @ (z @ params.w_value_self)
    cross_weights = compute_attention(
        embeddings @ params.w_query_cross, z @ params.w_key_cross, params.softmax_axis
    )
    z = z + cross_weights.T @ (embeddings @ params.w_value_cross)
    return z @ params.w_out, cross_weights, self_weights


def _archival_record(
    latent: LatentState,
    params: DenoiserParams,
    cross_weights: torch.Tensor,
    self_weights: torch.Tensor,
) -> AttentionRecord:
    h, w = params.grid.height, params.grid.width
    cross = cross_weights.detach().reshape(1, params.token_count, h, w).to(torch.float32)
    selfatt = self_weights.detach().reshape(1, params.grid.patches, params.grid.patches)
    return AttentionRecord(
        timestep=latent.timestep,
        layer_id=0,
        grid=params.grid,
        cross=cross,
        self_attention=selfatt.to(torch.float32),
        token_strings=params.token_strings,
    )


def forward(
    latent: LatentState,
    params: DenoiserParams,
    cfg_scale: float = 7.5,
    null_condition: bool = False,
) -> ForwardOutput:
    """Classifier-free-guided noise prediction plus the attention record.

    The record always reflects the pass whose attention drives guidance: the
    conditional pass, or the null pass when ``null_condition`` is set (which
    also disables the classifier-free mix).
    """
    _check_compatible(latent, params)
    z = latent.values
    if null_condition:
        pred, cross_w, self_w = _single_pass(z, params, params.null_embeddings)
        return ForwardOutput(pred.detach(), _archival_record(latent, params, cross_w, self_w))
    pred_cond, cross_w, self_w = _single_pass(z, params, params.token_embeddings)
    pred_null, _, _ = _single_pass(z, params, params.null_embeddings)
    pred = pred_null + cfg_scale * (pred_cond - pred_null)
    return ForwardOutput(pred.detach(), _archival_record(latent, params, cross_w, self_w))


def evaluate_guidance(
    latent: LatentState,
    params: DenoiserParams,
    subjects: SubjectSet,
    lam: float = 1.0,
    bins: int = DEFAULT_OTSU_BINS,
) -> GuidanceEvaluation:
    """Losses, their gradient w.r.t. the latent, and the archival record.

    The gradient differentiates through both attention softmaxes, the masked
    aggregation (numerator and denominator), and the min-overlap terms; mask
    membership itself is held constant. Only the conditional pass matters
    for the losses, so the null pass is skipped here.
    """
    _check_compatible(latent, params)
    for k in subjects.indices:
        if k >= params.token_count:
            raise ConfigurationError(
                f"subject index {k} out of range for {params.token_count} tokens"
            )
    z = latent.values.detach().clone().requires_grad_(True)
    _, cross_weights, self_weights = _single_pass(z, params, params.token_embeddings)

    h, w = params.grid.height, params.grid.width
    cross_maps = [
        CrossAttentionMap(token_index=k, grid=params.grid, values=cross_weights[k].reshape(h, w))
        for k in subjects.indices
    ]
    field = SelfAttentionField(grid=params.grid, values=self_weights)
    total, losses = guidance_from_maps(cross_maps, field, subjects, lam, bins=bins)
    total.backward()
    gradient = z.grad.detach().clone()

    record = _archival_record(latent, params, cross_weights, self_weights)
    record_losses = evaluate_records([record], subjects, lam, bins=bins)
    return GuidanceEvaluation(
        losses=losses, gradient=gradient, record=record, record_losses=record_losses
    )


def loss_grad_wrt_latent(
    latent: LatentState,
    params: DenoiserParams,
    subjects: SubjectSet,
    lam: float = 1.0,
    bins: int = DEFAULT_OTSU_BINS,
) -> tuple[GuidanceLosses, torch.Tensor]:
    """Total guidance loss and its gradient w.r.t. the latent values."""
    ev = evaluate_guidance(latent, params, subjects, lam, bins=bins)
    return ev.losses, ev.gradient


def apply_gradient_step(latent: LatentState, gradient: torch.Tensor, step_size: float) -> LatentState:
    """One gradient-descent step on the latent values."""
    return replace(latent, values=(latent.values - step_size * gradient))
