import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from renderctl.field import LatentCodes, SceneModel
from renderctl.lighting import SkyDecoder

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


def perturb(module, scale, seed):
    """Give zero-initialized output layers some random weight."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


@pytest.fixture
def toy_model():
    """A small float64 scene model with non-trivial geometry, shadow and tone."""
    model = SceneModel(frame_ids=["a", "b"], geometry_hidden=32, geometry_depth=2, seed=1).double()
    perturb(model.geometry.net[-1], 0.02, 2)
    perturb(model.shadow.net[-1], 0.1, 3)
    perturb(model.tone_mapper.net[-1], 0.05, 4)
    return model


@pytest.fixture
def toy_decoder():
    torch.manual_seed(5)
    dec = SkyDecoder(latent_dim=16, hidden=(32, 32)).double()
    with torch.no_grad():
        dec.net[-1].weight.mul_(0.1)
        dec.net[-1].bias.fill_(-0.5)
    return dec.freeze()


@pytest.fixture
def toy_codes():
    gen = torch.Generator().manual_seed(6)
    return LatentCodes(torch.randn(1, 16, generator=gen, dtype=torch.float64),
                       torch.randn(1, 8, generator=gen, dtype=torch.float64),
                       torch.randn(1, 8, generator=gen, dtype=torch.float64))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
