import numpy as np
import pytest
import torch

from ctxmim.config import BackboneConfig


# criterion number -> PASS/FAIL line, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}

TINY = dict(image_size=(8, 8), channels=1, patch_size=4, embed_dim=8, depth=1, heads=2)


@pytest.fixture
def tiny_config():
    return BackboneConfig(**TINY)


@pytest.fixture
def small_config():
    return BackboneConfig(image_size=(16, 16), channels=2, patch_size=4, embed_dim=16, depth=2,
                          heads=4, mlp_ratio=2.0)


def rand_image(config, seed, batch=None):
    rng = np.random.default_rng(seed)
    shape = (config.channels, config.height, config.width)
    if batch is not None:
        shape = (batch,) + shape
    return torch.from_numpy(rng.random(shape))


def randomize_params(model, seed, scale=0.3):
    """Move every parameter to a random point so no gradient path is trivially zero."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return model


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
