import numpy as np
import pytest

from splatforge.authoring import train_archive
from splatforge.net.unet import NetworkConfig
from splatforge.training import InfusionSchedule
from synthetic_data import torus_cloud


@pytest.fixture(scope="session")
def toy_archive():
    """Small trained primitive shared by wiring tests.

    Briefly trained; good enough to exercise the full pipeline, not to
    reproduce the exemplar.
    """
    cloud = torus_cloud(seed=0, n_theta=48, n_phi=16)
    archive, log = train_archive(
        cloud, "toy-torus", seed=5,
        target_resolution=16, coarse_resolution=8,
        net_cfg=NetworkConfig(base_channels=8, channel_mult=2, depth=1),
        schedule=InfusionSchedule(iterations=100))
    assert len(log) >= 1
    return archive
