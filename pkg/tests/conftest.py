import numpy as np
import pytest

from semvox.geometry import CameraIntrinsics


@pytest.fixture
def k():
    return CameraIntrinsics(f_x=500.0, f_y=500.0, o_x=128.0, o_y=128.0, b=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
