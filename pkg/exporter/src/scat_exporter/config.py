"""Export configuration."""

from __future__ import annotations

from dataclasses import dataclass


class ExportError(Exception):
    """Export could not proceed; the message explains what to change."""


class ResolutionNotFoundError(ExportError):
    def __init__(self, wanted: tuple[int, int], available: set[tuple[int, int]]):
        listing = ", ".join(f"{h}x{w}" for h, w in sorted(available)) or "none"
        super().__init__(
            f"no attention maps at {wanted[0]}x{wanted[1]}; "
            f"available resolutions: {listing}"
        )
        self.available = available


@dataclass(frozen=True)
class ExportConfig:
    """What to capture and where to put it.

    ``resolution`` selects the attention-map grid to keep (16x16 for the
    SD1 family, 24x24 for SD2-class models). ``timestep_stride`` keeps
    every n-th sampling step; ``layers`` is an optional allowlist of layer
    ids. Subject indices refer to positions in the tokenizer output that
    ends up in the trace metadata.
    """

    model_id: str
    prompt: str
    subject_indices: tuple[int, ...]
    output_path: str
    resolution: tuple[int, int] = (16, 16)
    steps: int = 50
    timestep_stride: int = 1
    layers: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.timestep_stride < 1:
            raise ExportError("timestep stride must be >= 1")
        if self.steps < 1:
            raise ExportError("need at least one step")
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise ExportError(f"bad resolution {self.resolution}")

    def keeps_step(self, step: int) -> bool:
        return step % self.timestep_stride == 0

    def keeps_layer(self, layer_id: int) -> bool:
        return self.layers is None or layer_id in self.layers
