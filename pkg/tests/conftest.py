import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from dqsal.core import RgbdSample

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


def random_map(rng, h=8, w=8):
    return rng.uniform(0.0, 1.0, size=(h, w))


def random_mask(rng, h=8, w=8, ensure_positive=False):
    m = (rng.uniform(size=(h, w)) > 0.5).astype(np.float64)
    if ensure_positive and m.sum() == 0:
        m[h // 2, w // 2] = 1.0
    return m


def make_sample(rng, size=16, sample_id="t0"):
    gt = np.zeros((size, size))
    r = size // 4
    gt[size // 2 - r:size // 2 + r, size // 2 - r:size // 2 + r] = 1.0
    rgb = rng.uniform(0.0, 1.0, size=(size, size, 3))
    depth = rng.uniform(0.0, 1.0, size=(size, size))
    return RgbdSample(id=sample_id, rgb=rgb, depth=depth, gt=gt)
