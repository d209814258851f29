import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(2)

# property tests share the box with the long end-to-end criterion; wall-clock
# deadlines would only add flakes
settings.register_profile(
    "ticnet", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ticnet")


@pytest.fixture(scope="session")
def tiny_model_cfg():
    from ticnet.model import reduced_config

    return reduced_config()


@pytest.fixture(scope="session")
def tiny_anchors():
    from ticnet.geometry import build_anchor_set

    lengths = [4.0, 6.5, 9.0, 12.0, 16.0, 20.0, 24.0, 30.0, 36.0, 42.0, 50.0, 58.0]
    return build_anchor_set(lengths, [4, 8, 16, 32])


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def random_interval(rng, lo=0.0, hi=100.0, min_len=0.5):
    a = rng.uniform(lo, hi - min_len)
    b = rng.uniform(a + min_len, hi)
    return a, b
