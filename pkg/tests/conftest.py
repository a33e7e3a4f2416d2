import numpy as np
import pytest
import torch

import pointtryon as pt
from pointtryon.training import (
    FrozenEncoders,
    TensorData,
    TrainConfig,
    finetune_spm,
    train_variant,
)

torch.set_num_threads(1)


TINY_PARAMS = pt.GeneratorParams(person_hw=(32, 32), garment_hw=(24, 24), cell=4)


@pytest.fixture(scope="session")
def tiny_params():
    return TINY_PARAMS


@pytest.fixture(scope="session")
def tiny_train():
    return TensorData(pt.generate_split(24, 0, TINY_PARAMS))


@pytest.fixture(scope="session")
def tiny_test():
    return TensorData(pt.generate_split(8, 10_000, TINY_PARAMS))


def mini_config(**kw) -> TrainConfig:
    base = dict(
        variant="base_geo",
        base_channels=16,
        seed=0,
        lr=3e-4,
        total_steps=120,
        warmup_steps=20,
        batch=8,
        sample_steps=10,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def mini_base_geo(tiny_train):
    """A briefly trained geometry-conditioned dual-branch model."""
    cfg = mini_config()
    model, _, history = train_variant(cfg, tiny_train)
    return model, cfg, history


@pytest.fixture(scope="session")
def mini_spm(tiny_train, mini_base_geo):
    """A briefly fine-tuned injection model plus its frozen encoders."""
    base_model, _, _ = mini_base_geo
    cfg = mini_config(variant="base_geo_spm_ploss", total_steps=60)
    encoders = FrozenEncoders(base_model)
    model, encoders, history = finetune_spm(
        cfg, tiny_train, base_model=base_model, encoders=encoders
    )
    return model, encoders, cfg, history
