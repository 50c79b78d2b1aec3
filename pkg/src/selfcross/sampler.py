"""Guided reverse process: noise-pool initialization, windowed guidance with
threshold-gated iterative refinement, and an unguided tail.

The scheduler is a deterministic first-order update (no stochastic term) on a
scaled-linear alpha-bar schedule. Guidance applies one latent gradient step
per guided scheduler step; at configured refinement steps, extra gradient
steps run until both losses fall below their thresholds or an iteration cap
is hit. Losses recorded in the trace are computed from the archival-precision
attention records, so offline analysis of the written trace reproduces them
exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .attention import DEFAULT_OTSU_BINS, AttentionRecord
from .denoiser import (
    STREAM_NOISE,
    DenoiserParams,
    GuidanceEvaluation,
    LatentState,
    apply_gradient_step,
    evaluate_guidance,
    forward,
    philox_stream,
)
from .errors import ConfigurationError
from .guidance import GuidanceLosses, SubjectSet

__all__ = [
    "SamplerConfig",
    "NoisePool",
    "TraceEntry",
    "RunTrace",
    "alpha_bar_schedule",
    "scheduler_step",
    "init_noise",
    "refine_latent",
    "run_pipeline",
]


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-process configuration.

    Defaults: 50 scheduler steps with guidance over the first 25, refinement
    at step indices 10 and 20, response-score threshold 0.2 and overlap
    threshold 0.3. ``step_size`` decays linearly across the guidance window.
    """

    total_steps: int = 50
    guidance_steps: int = 25
    refinement_steps: tuple[int, ...] = (10, 20)
    tau_cross: float = 0.2
    tau_self_cross: float = 0.3
    tau_max_iter: int = 10
    lam: float = 1.0
    step_size: float = 0.02
    cfg_scale: float = 7.5
    noise_pool_size: int = 4
    noise_opt_rounds: int = 10
    noise_opt_lr: float = 0.05
    seed: int = 0
    otsu_bins: int = DEFAULT_OTSU_BINS
    beta_start: float = 0.00085
    beta_end: float = 0.012
    train_timesteps: int = 1000

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")
        if not 0 <= self.guidance_steps <= self.total_steps:
            raise ConfigurationError(
                f"guidance_steps {self.guidance_steps} outside [0, {self.total_steps}]"
            )
        bad = [s for s in self.refinement_steps if not 0 <= s < max(self.guidance_steps, 1)]
        if self.guidance_steps > 0 and bad:
            raise ConfigurationError(
                f"refinement steps {bad} outside the guidance window "
                f"[0, {self.guidance_steps})"
            )
        if self.tau_cross <= 0 or self.tau_self_cross <= 0:
            raise ConfigurationError("thresholds must be positive")
        if self.tau_max_iter < 0:
            raise ConfigurationError("tau_max_iter must be >= 0")
        if self.step_size <= 0:
            raise ConfigurationError("step_size must be positive")
        if self.noise_pool_size < 1:
            raise ConfigurationError("noise pool needs at least one candidate")
        if self.noise_opt_rounds < 0 or self.noise_opt_lr <= 0:
            raise ConfigurationError("invalid noise optimization settings")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if self.train_timesteps < self.total_steps:
            raise ConfigurationError("train_timesteps must cover total_steps")

    @property
    def tau_max_alter_step(self) -> int:
        """Countdown step at which guidance stops (steps remaining after the window)."""
        return self.total_steps - self.guidance_steps

    def effective_step_size(self, step_index: int) -> float:
        """Latent step size at a guided step: linear decay across the window."""
        return self.step_size * (1.0 - step_index / self.guidance_steps)


def alpha_bar_schedule(config: SamplerConfig) -> torch.Tensor:
    """Cumulative alpha products at the sampled timesteps, plus the terminal 1.0.

    Betas are scaled-linear (linear in sqrt space) over the training
    discretization; sampling visits ``total_steps`` evenly strided timesteps
    from high noise to low. Entry i is alpha-bar at sampling step i; the last
    entry is 1.0 (fully denoised).
    """
    betas = (
        torch.linspace(
            math.sqrt(config.beta_start),
            math.sqrt(config.beta_end),
            config.train_timesteps,
            dtype=torch.float64,
        )
        ** 2
    )
    alpha_bar = torch.cumprod(1.0 - betas, dim=0)
    stride = config.train_timesteps // config.total_steps
    timesteps = torch.arange(config.total_steps - 1, -1, -1) * stride
    values = alpha_bar[timesteps]
    return torch.cat([values, torch.ones(1, dtype=torch.float64)])


def scheduler_step(
    latent: LatentState,
    noise_prediction: torch.Tensor,
    step_index: int,
    config: SamplerConfig,
) -> LatentState:
    """Deterministic first-order move to the next (less noisy) timestep."""
    if not 0 <= step_index < config.total_steps:
        raise ConfigurationError(
            f"step index {step_index} outside [0, {config.total_steps})"
        )
    schedule = alpha_bar_schedule(config)
    ab_now = schedule[step_index]
    ab_next = schedule[step_index + 1]
    z = latent.values
    predicted_clean = (z - torch.sqrt(1.0 - ab_now) * noise_prediction) / torch.sqrt(ab_now)
    z_next = torch.sqrt(ab_next) * predicted_clean + torch.sqrt(1.0 - ab_next) * noise_prediction
    return replace(latent, values=z_next, timestep=step_index + 1)


@dataclass(frozen=True)
class NoisePool:
    """Initial-noise candidates with their losses; selection is argmin total."""

    candidates: tuple[tuple[LatentState, GuidanceLosses], ...]
    selected_index: int

    def __post_init__(self):
        if not self.candidates:
            raise ConfigurationError("noise pool is empty")
        if not 0 <= self.selected_index < len(self.candidates):
            raise ConfigurationError("selected candidate out of range")

    @property
    def selected(self) -> tuple[LatentState, GuidanceLosses]:
        return self.candidates[self.selected_index]


@dataclass(frozen=True)
class TraceEntry:
    """One recorded loss evaluation during the reverse process."""

    step_index: int
    phase: str  # "guidance" or "refinement"
    iteration: int
    losses: GuidanceLosses
    step_size: float


@dataclass
class RunTrace:
    """Everything observable about one pipeline run.

    ``entries`` and ``records`` are parallel: one of each per executed loss
    evaluation, in execution order.
    """

    config: SamplerConfig
    params_seed: int
    entries: list[TraceEntry] = field(default_factory=list)
    records: list[AttentionRecord] = field(default_factory=list)
    refinement_iterations: dict[int, int] = field(default_factory=dict)
    noise_pool_totals: tuple[float, ...] = ()
    selected_candidate: int = 0
    final_latent: LatentState | None = None

    def add(self, entry: TraceEntry, record: AttentionRecord) -> None:
        self.entries.append(entry)
        self.records.append(record)

    def step_entries(self, step_index: int, phase: str | None = None) -> list[TraceEntry]:
        return [
            e
            for e in self.entries
            if e.step_index == step_index and (phase is None or e.phase == phase)
        ]


def _draw_noise(rng: np.random.Generator, params: DenoiserParams) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal((params.grid.patches, params.channels)))


def init_noise(
    config: SamplerConfig, params: DenoiserParams, subjects: SubjectSet
) -> NoisePool:
    """Optimize a pool of initial noises and pick the lowest-loss candidate.

    Each candidate keeps a fixed Gaussian draw and optimizes a per-coordinate
    mean and log-std by plain gradient descent on the total guidance loss at
    the start of the reverse process (latent = mean + std * draw). Ties on
    the final loss break toward the earliest candidate.
    """
    rng = philox_stream(config.seed, STREAM_NOISE)
    candidates: list[tuple[LatentState, GuidanceLosses]] = []
    for _ in range(config.noise_pool_size):
        eps = _draw_noise(rng, params)
        mu = torch.zeros_like(eps)
        log_sigma = torch.zeros_like(eps)
        for _ in range(config.noise_opt_rounds):
            sigma = torch.exp(log_sigma)
            state = LatentState(grid=params.grid, values=mu + sigma * eps, timestep=0)
            ev = evaluate_guidance(state, params, subjects, config.lam, bins=config.otsu_bins)
            # d/d(mu) = dL/dz, d/d(log_sigma) = dL/dz * eps * sigma.
            mu = mu - config.noise_opt_lr * ev.gradient
            log_sigma = log_sigma - config.noise_opt_lr * (ev.gradient * eps * sigma)
        final = LatentState(
            grid=params.grid, values=mu + torch.exp(log_sigma) * eps, timestep=0
        )
        ev = evaluate_guidance(final, params, subjects, config.lam, bins=config.otsu_bins)
        candidates.append((final, ev.record_losses))
    totals = [losses.total for _, losses in candidates]
    selected = int(np.argmin(np.asarray(totals)))
    return NoisePool(candidates=tuple(candidates), selected_index=selected)


def _evaluate(
    latent: LatentState, config: SamplerConfig, params: DenoiserParams, subjects: SubjectSet
) -> GuidanceEvaluation:
    return evaluate_guidance(latent, params, subjects, config.lam, bins=config.otsu_bins)


def refine_latent(
    latent: LatentState,
    config: SamplerConfig,
    params: DenoiserParams,
    subjects: SubjectSet,
    trace: RunTrace | None = None,
    initial: GuidanceEvaluation | None = None,
) -> tuple[LatentState, int]:
    """Repeat latent gradient steps until both losses meet their thresholds
    or the iteration cap is reached. Returns the refined latent and the
    number of gradient steps taken.

    ``initial`` lets the caller pass an evaluation of the incoming latent it
    already performed (and traced); otherwise one is performed here.
    """
    step_index = latent.timestep
    if not 0 <= step_index < config.guidance_steps:
        raise ConfigurationError(
            f"refinement at step {step_index} is outside the guidance window "
            f"[0, {config.guidance_steps})"
        )
    step_size = config.effective_step_size(step_index)
    ev = initial
    if ev is None:
        ev = _evaluate(latent, config, params, subjects)
        if trace is not None:
            trace.add(
                TraceEntry(step_index, "refinement", 0, ev.record_losses, step_size),
                ev.record,
            )
    iterations = 0
    while (
        ev.record_losses.exceeds(config.tau_cross, config.tau_self_cross)
        and iterations < config.tau_max_iter
    ):
        latent = apply_gradient_step(latent, ev.gradient, step_size)
        iterations += 1
        ev = _evaluate(latent, config, params, subjects)
        if trace is not None:
            trace.add(
                TraceEntry(step_index, "refinement", iterations, ev.record_losses, step_size),
                ev.record,
            )
    return latent, iterations


def run_pipeline(
    prompt_tokens: tuple[str, ...] | list[str],
    subjects: SubjectSet,
    config: SamplerConfig,
    params: DenoiserParams,
) -> tuple[LatentState, RunTrace]:
    """Full guided run: noise-pool start, guided window with refinement,
    unguided tail. Deterministic given (config, params).

    With ``guidance_steps == 0`` the run is a plain unguided sample from the
    raw seeded draw: no pool optimization, no loss evaluations, no records.
    """
    tokens = tuple(prompt_tokens)
    if tokens != params.token_strings:
        raise ConfigurationError(
            f"prompt tokens {tokens} do not match denoiser tokens {params.token_strings}"
        )
    for k in subjects.indices:
        if k >= len(tokens):
            raise ConfigurationError(
                f"subject index {k} out of range for {len(tokens)} tokens"
            )
    guided = config.guidance_steps > 0
    if guided:
        subjects.require_pairs()

    trace = RunTrace(config=config, params_seed=params.seed)
    if guided:
        pool = init_noise(config, params, subjects)
        trace.noise_pool_totals = tuple(l.total for _, l in pool.candidates)
        trace.selected_candidate = pool.selected_index
        latent = pool.selected[0]
    else:
        latent = params.initial_latent(config.seed)

    for step in range(config.total_steps):
        latent = replace(latent, timestep=step)
        if step < config.guidance_steps:
            ev = _evaluate(latent, config, params, subjects)
            step_size = config.effective_step_size(step)
            trace.add(
                TraceEntry(step, "guidance", 0, ev.record_losses, step_size), ev.record
            )
            if step in config.refinement_steps and ev.record_losses.exceeds(
                config.tau_cross, config.tau_self_cross
            ):
                latent, iters = refine_latent(
                    latent, config, params, subjects, trace=trace, initial=ev
                )
                trace.refinement_iterations[step] = iters
            else:
                latent = apply_gradient_step(latent, ev.gradient, step_size)
        prediction = forward(latent, params, cfg_scale=config.cfg_scale).noise_prediction
        latent = scheduler_step(latent, prediction, step, config)

    trace.final_latent = latent
    return latent, trace
