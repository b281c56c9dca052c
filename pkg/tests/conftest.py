import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def textured_frame():
    from m3v.synth import band_limited_texture

    return band_limited_texture(48, 64, seed=7)[:, :, None]
