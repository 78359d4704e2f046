import numpy as np
import pytest

from cmflow.simworld import SimConfig, generate_sequence


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_seq():
    """Short noiseless sequence shared by read-only tests."""
    return generate_sequence(SimConfig(n_frames=6, n_static=120, n_movers=3), 7)


@pytest.fixture(scope="session")
def noisy_seq():
    cfg = SimConfig(n_frames=6, n_static=120, n_movers=3, rrv_noise=0.1, box_center_noise=0.1,
                    flow_noise=1.0, box_dropout=0.1, coord_noise=0.02)
    return generate_sequence(cfg, 8)
