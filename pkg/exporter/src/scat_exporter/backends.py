"""Capture backends.

``MockUNetBackend`` and ``MockMMDiTBackend`` synthesize realistic attention
shapes without any model weights, so format conformance and the splitting
logic are testable anywhere. ``DiffusersBackend`` hooks a real pretrained
pipeline's attention processors; it needs the optional ``real`` extra and
model weights on the host.
"""

from __future__ import annotations

from typing import Iterator, Protocol

import numpy as np

from .capture import JointCapture, SplitCapture, split_joint_attention
from .config import ExportConfig, ExportError


class CaptureBackend(Protocol):
    def tokenize(self, prompt: str) -> list[str]: ...

    def captures(self, config: ExportConfig) -> Iterator[SplitCapture]: ...

    def available_resolutions(self) -> set[tuple[int, int]]: ...


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class MockUNetBackend:
    """Deterministic stand-in for a UNet pipeline with per-layer resolutions.

    Layer 0 runs at a coarse 8x8 bottleneck; layers 1 and 2 run at 16x16
    with two heads each, mirroring how real backbones expose several map
    resolutions of which only one is exported. Cross maps are softmaxed
    over tokens per patch, self maps over patches per patch, the same
    normalization a real backbone produces.
    """

    def __init__(self, heads: int = 2):
        self.heads = heads
        self.layer_resolutions = {0: (8, 8), 1: (16, 16), 2: (16, 16)}

    def tokenize(self, prompt: str) -> list[str]:
        return ["<start>"] + prompt.split() + ["<end>"]

    def available_resolutions(self) -> set[tuple[int, int]]:
        return set(self.layer_resolutions.values())

    def captures(self, config: ExportConfig) -> Iterator[SplitCapture]:
        tokens = len(self.tokenize(config.prompt))
        rng = np.random.default_rng(config.seed)
        for step in range(config.steps):
            for layer_id, (h, w) in self.layer_resolutions.items():
                patches = h * w
                # Draw before filtering so subsampled exports see the same
                # maps a full export would.
                cross_logits = rng.normal(size=(self.heads, tokens, patches))
                self_logits = rng.normal(size=(self.heads, patches, patches))
                if not (config.keeps_step(step) and config.keeps_layer(layer_id)):
                    continue
                cross = _softmax(cross_logits, axis=1)  # over tokens, per patch
                selfatt = _softmax(self_logits, axis=2)  # over patches, per patch
                yield SplitCapture(
                    timestep=step,
                    layer_id=layer_id,
                    resolution=(h, w),
                    cross=cross.reshape(self.heads, tokens, h, w).astype(np.float32),
                    self_attention=selfatt.astype(np.float32),
                )


class MockMMDiTBackend:
    """Deterministic stand-in for a multimodal transformer with joint
    attention over two concatenated text streams plus image patches.

    Both layers run at a fixed 8x8 patch grid."""

    def __init__(self, heads: int = 2):
        self.resolution = (8, 8)
        self.heads = heads
        self.layer_ids = (0, 1)

    def tokenize(self, prompt: str) -> list[str]:
        return ["<start>"] + prompt.split() + ["<end>"]

    def available_resolutions(self) -> set[tuple[int, int]]:
        return {self.resolution}

    def joint_captures(self, config: ExportConfig) -> Iterator[JointCapture]:
        tokens = len(self.tokenize(config.prompt))
        h, w = self.resolution
        patches = h * w
        sequence = 2 * tokens + patches
        rng = np.random.default_rng(config.seed)
        for step in range(config.steps):
            for layer_id in self.layer_ids:
                logits = rng.normal(size=(self.heads, sequence, sequence))
                if not (config.keeps_step(step) and config.keeps_layer(layer_id)):
                    continue
                yield JointCapture(
                    timestep=step,
                    layer_id=layer_id,
                    resolution=self.resolution,
                    joint=_softmax(logits, axis=2),
                    text_ranges=((0, tokens), (tokens, 2 * tokens)),
                    image_range=(2 * tokens, 2 * tokens + patches),
                )

    def captures(self, config: ExportConfig) -> Iterator[SplitCapture]:
        for joint in self.joint_captures(config):
            yield split_joint_attention(joint)


class DiffusersBackend:
    """Attention-processor hook for a real pretrained pipeline.

    Replaces every attention processor with a capturing wrapper, runs the
    pipeline once, and yields one capture per (step, layer) at the hooked
    resolutions. Requires the ``real`` extra and downloadable weights.
    """

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch  # noqa: F401
            from diffusers import DiffusionPipeline
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ExportError(
                "the diffusers backend needs the optional [real] extra "
                "(pip install 'scat-exporter[real]')"
            ) from exc
        self._model_id = model_id
        self._device = device
        self._pipeline = DiffusionPipeline.from_pretrained(model_id)
        self._pipeline.to(device)

    def tokenize(self, prompt: str) -> list[str]:  # pragma: no cover - needs weights
        tokenizer = self._pipeline.tokenizer
        ids = tokenizer(prompt, truncation=True).input_ids
        return tokenizer.convert_ids_to_tokens(ids)

    def available_resolutions(self) -> set[tuple[int, int]]:  # pragma: no cover
        return set(self._seen_resolutions)

    def captures(self, config: ExportConfig) -> Iterator[SplitCapture]:  # pragma: no cover
        import torch

        captured: list[SplitCapture] = []
        self._seen_resolutions: set[tuple[int, int]] = set()
        state = {"step": 0, "layer_of_module": {}, "next_layer": 0}
        unet = self._pipeline.unet

        def hook_processor(module_name, module):
            base = module.processor

            class Capturing:
                def __call__(inner, attn, hidden_states, encoder_hidden_states=None, **kwargs):
                    is_cross = encoder_hidden_states is not None
                    source = encoder_hidden_states if is_cross else hidden_states
                    query = attn.head_to_batch_dim(attn.to_q(hidden_states))
                    key = attn.head_to_batch_dim(attn.to_k(source))
                    probs = attn.get_attention_scores(query, key)
                    heads = attn.heads
                    seq = hidden_states.shape[1]
                    side = int(seq**0.5)
                    self._seen_resolutions.add((side, side))
                    if (side, side) == config.resolution:
                        if module_name not in state["layer_of_module"]:
                            state["layer_of_module"][module_name] = state["next_layer"]
                            state["next_layer"] += 1
                        layer_id = state["layer_of_module"][module_name]
                        if config.keeps_step(state["step"]) and config.keeps_layer(layer_id):
                            # Conditional half of the classifier-free batch.
                            maps = probs.reshape(-1, heads, seq, probs.shape[-1])[-1]
                            array = maps.detach().float().cpu().numpy()
                            if is_cross:
                                cross = array.transpose(0, 2, 1).reshape(
                                    heads, -1, side, side
                                )
                                inner._pending_cross = cross.astype(np.float32)
                            elif getattr(inner, "_pending_cross", None) is not None:
                                captured.append(
                                    SplitCapture(
                                        timestep=state["step"],
                                        layer_id=layer_id,
                                        resolution=(side, side),
                                        cross=inner._pending_cross,
                                        self_attention=array.astype(np.float32),
                                    )
                                )
                                inner._pending_cross = None
                    return base(attn, hidden_states, encoder_hidden_states, **kwargs)

            module.processor = Capturing()

        for name, module in unet.named_modules():
            if name.endswith("attn1") or name.endswith("attn2"):
                hook_processor(name, module)

        def on_step(pipe, step, timestep, kwargs):
            state["step"] = step + 1
            return kwargs

        try:
            generator = torch.Generator(self._device).manual_seed(config.seed)
            self._pipeline(
                config.prompt,
                num_inference_steps=config.steps,
                generator=generator,
                callback_on_step_end=on_step,
            )
        except torch.cuda.OutOfMemoryError as exc:
            raise ExportError(
                "ran out of device memory while capturing; reduce --steps or "
                "raise --stride to subsample timesteps"
            ) from exc
        yield from captured


BACKENDS = {
    "mock-unet": MockUNetBackend,
    "mock-mmdit": MockMMDiTBackend,
}


def backend_for(config: ExportConfig) -> CaptureBackend:
    if config.model_id in BACKENDS:
        return BACKENDS[config.model_id]()
    return DiffusersBackend(config.model_id)
