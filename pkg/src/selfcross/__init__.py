"""Self-cross attention guidance toolkit.

Core pieces: attention-map primitives (softmax attention, normalization,
histogram masking, masked aggregation, dual-encoder merging), overlap-based
guidance losses with exact gradients, a desk-scale differentiable denoiser,
the guided sampling pipeline with noise-pool initialization and iterative
refinement, a binary attention-trace format with an offline analyzer, and a
VQA-based faithfulness scorer.
"""

__version__ = "0.1.0"

from .attention import (
    AggregatedSelfMap,
    AttentionRecord,
    CrossAttentionMap,
    PatchGrid,
    SelfAttentionField,
    SubjectMask,
    aggregate_self_attention,
    average_heads_layers,
    compute_attention,
    merge_dual_encoder,
    normalize_map,
    otsu_threshold,
    subject_mask,
)
from .denoiser import (
    DenoiserParams,
    ForwardOutput,
    LatentState,
    forward,
    loss_grad_wrt_latent,
)
from .faithfulness import (
    EndpointConfig,
    PromptCase,
    ScoreReport,
    VQATranscript,
    build_question_prompt,
    compute_scores,
    load_prompt_set,
    parse_answers,
    score_batch,
)
from .guidance import (
    GuidanceLosses,
    SubjectSet,
    cross_attn_response_score,
    evaluate_records,
    pairwise_overlap,
    self_cross_score,
    self_self_overlap,
    total_loss,
)
from .sampler import (
    NoisePool,
    RunTrace,
    SamplerConfig,
    init_noise,
    refine_latent,
    run_pipeline,
    scheduler_step,
)
from .traceio import TraceMetadata, analyze_trace, read_trace, write_trace

__all__ = [
    "__version__",
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
    "SubjectSet",
    "GuidanceLosses",
    "cross_attn_response_score",
    "pairwise_overlap",
    "self_cross_score",
    "self_self_overlap",
    "total_loss",
    "evaluate_records",
    "LatentState",
    "DenoiserParams",
    "ForwardOutput",
    "forward",
    "loss_grad_wrt_latent",
    "SamplerConfig",
    "NoisePool",
    "RunTrace",
    "init_noise",
    "refine_latent",
    "run_pipeline",
    "scheduler_step",
    "TraceMetadata",
    "write_trace",
    "read_trace",
    "analyze_trace",
    "PromptCase",
    "VQATranscript",
    "ScoreReport",
    "EndpointConfig",
    "build_question_prompt",
    "parse_answers",
    "compute_scores",
    "score_batch",
    "load_prompt_set",
]
