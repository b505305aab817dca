import numpy as np
import pytest
import torch

from mtcvae.model import MTCVAE, ModelConfig


def tiny_config(**kw):
    base = dict(c=2, O=2, dim_z=3, dim_w=2, base_filters=2, height=4, width=4, channels=1)
    base.update(kw)
    return ModelConfig(**base)


def randomize_batchnorm(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm3d):
                m.running_mean.normal_(0, 0.1, generator=g)
                m.running_var.uniform_(0.5, 1.5, generator=g)
                m.weight.uniform_(0.5, 1.5, generator=g)
                m.bias.normal_(0, 0.1, generator=g)
    return model


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return randomize_batchnorm(MTCVAE(tiny_config())).eval()


@pytest.fixture(scope="session")
def mnist_like_config():
    return ModelConfig(c=5, O=2, dim_z=8, dim_w=4, base_filters=2, height=64, width=64)


def random_video(T, H=4, W=4, C=1, seed=0):
    return np.random.default_rng(seed).random((T, H, W, C)).astype(np.float32)


# acceptance lines collected by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
