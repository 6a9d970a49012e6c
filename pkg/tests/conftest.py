import numpy as np
import pytest
import torch

from rsfiqa.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small enough that a few epochs run in well under a second."""
    return RunConfig(
        height=16, width=16, levels=3, backbone_channels=(4, 8, 8), L=3,
        dim=8, guide_dim=8, text_dim=8, max_tokens=16, vocab_size=64, mlp_hidden=8,
        batch_size=4, lr=1e-3, epochs=3, t_max=3,
    )


def t64(a, grad=False):
    return torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)
