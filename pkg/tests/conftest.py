import numpy as np
import pytest

from latentsynth.fpcore import FingerprintImage


def gray(value, shape=(16, 16), img_id="img", resolution=500):
    return FingerprintImage(np.full(shape, value, np.uint8), img_id, resolution)


def ridge_image(size=96, period=8.0, angle=0.3, img_id="ridge", noise=0.0, seed=0):
    """Parallel sinusoidal ridges (dark on white)."""
    yy, xx = np.mgrid[0:size, 0:size]
    wave = np.cos(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period)
    px = 132.0 - 95.0 * wave
    if noise:
        px = px + np.random.default_rng(seed).normal(0, noise, px.shape)
    return FingerprintImage(np.clip(np.rint(px), 0, 255).astype(np.uint8), img_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
