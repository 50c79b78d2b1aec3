"""Finite-difference verification of the analytic guidance gradient.

Central differences are compared per coordinate against the reverse-mode
gradient. The loss surface is piecewise smooth: min-overlap terms kink where
the two sides tie, the response score kinks at argmax changes, and the
subject masks flip discretely. A configuration where any such selector
changes within the probe radius of a tested coordinate is discarded and
redrawn, since no finite-difference estimate is meaningful across a kink.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .attention import (
    DEFAULT_OTSU_BINS,
    CrossAttentionMap,
    PatchGrid,
    SelfAttentionField,
    aggregate_self_attention,
    normalize_map,
    subject_mask,
)
from .denoiser import DenoiserParams, LatentState, _single_pass, loss_grad_wrt_latent
from .errors import ConfigurationError
from .guidance import SubjectSet, guidance_from_maps

__all__ = ["CoordinateCheck", "GradCheckReport", "run_gradcheck"]

DEFAULT_TOKENS = ("a", "bear", "and", "an", "elephant")
DEFAULT_SUBJECTS = (1, 4)


@dataclass(frozen=True)
class CoordinateCheck:
    seed: int
    coordinate: int
    analytic: float
    numeric: float
    passed: bool


@dataclass(frozen=True)
class GradCheckReport:
    checks: tuple[CoordinateCheck, ...]
    resampled: int
    rtol: float
    atol: float
    step: float

    @property
    def failures(self) -> tuple[CoordinateCheck, ...]:
        return tuple(c for c in self.checks if not c.passed)

    @property
    def passed(self) -> bool:
        return not self.failures


def _loss_value(
    latent: LatentState, params: DenoiserParams, subjects: SubjectSet, lam: float, bins: int
) -> float:
    with torch.no_grad():
        _, cross_weights, self_weights = _single_pass(
            latent.values, params, params.token_embeddings
        )
        h, w = params.grid.height, params.grid.width
        maps = [
            CrossAttentionMap(token_index=k, grid=params.grid, values=cross_weights[k].reshape(h, w))
            for k in subjects.indices
        ]
        field = SelfAttentionField(grid=params.grid, values=self_weights)
        total, _ = guidance_from_maps(maps, field, subjects, lam, bins=bins)
        return float(total)


def _selector_fingerprint(
    latent: LatentState, params: DenoiserParams, subjects: SubjectSet, bins: int
) -> tuple:
    """Everything discrete in the loss: masks, argmax positions, min sides."""
    with torch.no_grad():
        _, cross_weights, self_weights = _single_pass(
            latent.values, params, params.token_embeddings
        )
        h, w = params.grid.height, params.grid.width
        field = SelfAttentionField(grid=params.grid, values=self_weights)
        masks = []
        argmaxes = []
        prepared = []
        for k in subjects.indices:
            m = CrossAttentionMap(
                token_index=k, grid=params.grid, values=cross_weights[k].reshape(h, w)
            )
            nm = normalize_map(m)
            mask = subject_mask(nm, bins=bins)
            agg = aggregate_self_attention(nm, field, mask)
            masks.append(tuple(mask.selected.nonzero().flatten().tolist()))
            argmaxes.append(int(nm.flat.argmax()))
            prepared.append((agg.values, nm.flat))
        maxima = torch.stack([1.0 - nm.max() for _, nm in prepared])
        top_subject = int(maxima.argmax())
        sides = []
        for a in range(len(prepared)):
            for b in range(a + 1, len(prepared)):
                agg_a, cross_a = prepared[a]
                agg_b, cross_b = prepared[b]
                sides.append((agg_a < cross_b).numpy().tobytes())
                sides.append((cross_a < agg_b).numpy().tobytes())
        return (tuple(masks), tuple(argmaxes), top_subject, tuple(sides))


def run_gradcheck(
    trials: int = 20,
    coords_per_trial: int = 10,
    step: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-5,
    base_seed: int = 0,
    lam: float = 1.0,
    tokens: tuple[str, ...] = DEFAULT_TOKENS,
    subject_indices: tuple[int, ...] = DEFAULT_SUBJECTS,
    grid: PatchGrid = PatchGrid(8, 8),
    bins: int = DEFAULT_OTSU_BINS,
    max_resamples: int = 200,
    corrupt_gradient: bool = False,
) -> GradCheckReport:
    """Run ``trials`` random configurations of the finite-difference suite.

    A coordinate passes when |analytic - numeric| <= atol + rtol * max(|a|, |n|).
    ``corrupt_gradient`` flips the analytic sign, for verifying that the
    harness actually detects wrong gradients.
    """
    subjects = SubjectSet(subject_indices)
    checks: list[CoordinateCheck] = []
    resampled = 0
    seed = base_seed
    produced = 0
    while produced < trials:
        if resampled > max_resamples:
            raise ConfigurationError(
                f"gave up after {max_resamples} resamples; loss surface too kinked"
            )
        params = DenoiserParams.create(seed, tokens, grid=grid)
        latent = params.initial_latent(seed)
        coord_rng = torch.Generator().manual_seed(seed)
        n_coords = latent.values.numel()
        coords = torch.randperm(n_coords, generator=coord_rng)[:coords_per_trial].tolist()

        stable = True
        for coord in coords:
            fingerprints = []
            for sign in (-1.0, 1.0):
                flat = latent.values.flatten().clone()
                flat[coord] += sign * step
                shifted = replace(latent, values=flat.reshape(latent.values.shape))
                fingerprints.append(_selector_fingerprint(shifted, params, subjects, bins))
            if fingerprints[0] != fingerprints[1]:
                stable = False
                break
        if not stable:
            resampled += 1
            seed += 1
            continue

        _, gradient = loss_grad_wrt_latent(latent, params, subjects, lam, bins=bins)
        if corrupt_gradient:
            gradient = -gradient
        grad_flat = gradient.flatten()
        for coord in coords:
            plus = latent.values.flatten().clone()
            minus = latent.values.flatten().clone()
            plus[coord] += step
            minus[coord] -= step
            f_plus = _loss_value(
                replace(latent, values=plus.reshape(latent.values.shape)),
                params, subjects, lam, bins,
            )
            f_minus = _loss_value(
                replace(latent, values=minus.reshape(latent.values.shape)),
                params, subjects, lam, bins,
            )
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = float(grad_flat[coord])
            passed = abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric))
            checks.append(CoordinateCheck(seed, coord, analytic, numeric, passed))
        produced += 1
        seed += 1
    return GradCheckReport(
        checks=tuple(checks), resampled=resampled, rtol=rtol, atol=atol, step=step
    )
