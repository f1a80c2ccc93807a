from pathlib import Path

import numpy as np
import pytest

from modalmix.config import RunConfig
from modalmix.model import ModelConfig
from modalmix.training import Example


def make_tiny_model_config(**overrides) -> ModelConfig:
    values = dict(
        model_dim=8,
        depth=1,
        heads=2,
        mlp_ratio=2,
        latent_channels=3,
        grid=(1, 2, 2),
        caption_len=3,
    )
    values.update(overrides)
    return ModelConfig(**values)


def make_examples(cfg: ModelConfig, n: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    shape = tuple(cfg.grid) + (cfg.latent_channels,)
    return [
        Example(
            latents=tuple(rng.uniform(-1.0, 1.0, size=shape) for _ in range(4)),
            caption=(1, 9, 13),
        )
        for _ in range(n)
    ]


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return make_tiny_model_config()


@pytest.fixture
def tiny_run_config(tmp_path: Path) -> RunConfig:
    """An 8x8, 2-frame setup whose commands finish in seconds."""
    return RunConfig(
        workdir=str(tmp_path / "work"),
        frames=2,
        height=8,
        width=8,
        codec_ft=1,
        codec_fh=4,
        codec_fw=4,
        model_dim=16,
        depth=1,
        heads=2,
        mlp_ratio=2,
        steps=3,
        batch_size=2,
        n_train=4,
        n_eval=2,
        workers=2,
        sample_steps=2,
        checkpoint_every=2,
        adapt_steps=2,
    )
