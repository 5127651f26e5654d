import numpy as np
import pytest
import torch

from diffrobust import (
    UNetConfig,
    build_linear_schedule,
    make_synthetic_twoclass,
)
from diffrobust.backbone import pretrain_backbone


@pytest.fixture(scope="session")
def tiny_cfg():
    return UNetConfig(
        resolution=8,
        in_channels=3,
        base_width=8,
        channel_mults=(1, 2),
        res_blocks=1,
        attention_resolutions=(4,),
        time_embed_dim=32,
    )


@pytest.fixture(scope="session")
def sched():
    return build_linear_schedule(100, 1e-3, 0.02)


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_cfg, sched):
    imgs = make_synthetic_twoclass(16, resolution=8, seed=0).images
    return pretrain_backbone(imgs, tiny_cfg, sched, steps=0, seed=0,
                             dataset_id="fixture")


class FlatLinearModel(torch.nn.Module):
    """Classifier with logits W @ flat(x) + b, handy for analytic oracles."""

    def __init__(self, W, b=None):
        super().__init__()
        W = torch.as_tensor(W, dtype=torch.float32)
        self.W = torch.nn.Parameter(W, requires_grad=False)
        if b is None:
            b = torch.zeros(W.shape[0])
        self.b = torch.nn.Parameter(torch.as_tensor(b, dtype=torch.float32),
                                    requires_grad=False)

    def forward(self, x):
        return x.reshape(x.shape[0], -1) @ self.W.T.to(x.dtype) + self.b.to(x.dtype)


@pytest.fixture
def flat_linear_model():
    return FlatLinearModel


def random_flat_model(rng, in_dim, classes):
    W = rng.standard_normal((classes, in_dim)).astype(np.float32)
    b = rng.standard_normal(classes).astype(np.float32)
    return FlatLinearModel(W, b)
