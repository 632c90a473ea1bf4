"""Shared fixtures: a deliberately small model so every test stays fast."""

import numpy as np
import pytest

from carrierstream import FrameTokens, ModelConfig, init_model, make_random_frames


@pytest.fixture()
def tiny_config() -> ModelConfig:
    return ModelConfig(
        layers=2,
        heads=2,
        d_model=32,
        ff_dim=64,
        vocab_size=64,
        max_positions=512,
        tokens_per_frame=8,
        memory_capacity=16,
    )


@pytest.fixture()
def tiny_weights(tiny_config):
    return init_model(tiny_config, seed=0)


@pytest.fixture()
def tiny_frames(tiny_config):
    return make_random_frames(6, tiny_config.tokens_per_frame, tiny_config.d_model, seed=1)


def copy_frames(frames: list[FrameTokens]) -> list[FrameTokens]:
    return [FrameTokens(f.frame_index, f.embeddings.copy()) for f in frames]


def rand_frame(index: int, n: int, d: int, rng: np.random.Generator) -> FrameTokens:
    return FrameTokens(index, rng.standard_normal((n, d)).astype(np.float32))
