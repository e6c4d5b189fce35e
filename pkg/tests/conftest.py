import numpy as np
import pytest

from deco.config import DataConfig, ModelConfig, RunConfig, TrainConfig


def tiny_model_config() -> ModelConfig:
    # smallest config that still exercises every architectural branch
    return ModelConfig(
        hidden_dim=16,
        num_queries=4,
        query_shape=(2, 2),
        decoder_layers=2,
        sim_kernel=3,
        cim_kernel=3,
        backbone_channels=(4, 6, 8, 8, 12),
        stage_blocks=(1, 1, 1),
        stage_dims=(8, 12, 8),
        block_kernel=3,
    )


def micro_run_config(tmp_seed: int = 1) -> RunConfig:
    return RunConfig(
        model=ModelConfig(
            hidden_dim=32,
            num_queries=9,
            query_shape=(3, 3),
            decoder_layers=2,
            sim_kernel=5,
            cim_kernel=5,
            backbone_channels=(8, 12, 16, 24, 32),
            stage_blocks=(1, 1, 1),
            stage_dims=(24, 32, 48),
        ),
        train=TrainConfig(seed=tmp_seed, epochs=2, batch_size=4, lr=3e-4,
                          lr_backbone=3e-4, lr_drop_epoch=2),
        data=DataConfig(seed=tmp_seed, count=40, holdout=10, image_size=64,
                        objects_min=1, objects_max=3, size_min=10, size_max=24),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model():
    from deco.model import build_model

    return build_model(tiny_model_config(), seed=0)
