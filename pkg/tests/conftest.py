import numpy as np
import pytest
import torch

from selfcross.attention import (
    AttentionRecord,
    CrossAttentionMap,
    PatchGrid,
    SelfAttentionField,
)


def map_of(values, token_index=0, normalized=False, grid=None) -> CrossAttentionMap:
    """Build a cross map from a flat list or nested list; grid inferred if square-able."""
    tensor = torch.as_tensor(values, dtype=torch.float64)
    if tensor.ndim == 1:
        if grid is None:
            grid = PatchGrid(1, tensor.numel())
        tensor = tensor.reshape(grid.height, grid.width)
    elif grid is None:
        grid = PatchGrid(*tensor.shape)
    return CrossAttentionMap(
        token_index=token_index, grid=grid, values=tensor, normalized=normalized
    )


def stochastic_field(grid: PatchGrid, rng: np.random.Generator) -> SelfAttentionField:
    raw = rng.random((grid.patches, grid.patches)) + 1e-3
    rows = raw / raw.sum(axis=1, keepdims=True)
    return SelfAttentionField(grid=grid, values=torch.from_numpy(rows))


def random_record(
    rng: np.random.Generator,
    grid: PatchGrid = PatchGrid(2, 2),
    tokens: int = 3,
    heads: int = 1,
    layer_id: int = 0,
    timestep: int = 0,
) -> AttentionRecord:
    cross = rng.random((heads, tokens, grid.height, grid.width)).astype(np.float32)
    raw = rng.random((heads, grid.patches, grid.patches)).astype(np.float32) + 1e-3
    selfatt = raw / raw.sum(axis=2, keepdims=True)
    return AttentionRecord(
        timestep=timestep,
        layer_id=layer_id,
        grid=grid,
        cross=torch.from_numpy(cross),
        self_attention=torch.from_numpy(selfatt),
        token_strings=tuple(f"tok{i}" for i in range(tokens)),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
