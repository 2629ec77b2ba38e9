import numpy as np
import pytest
from scipy import ndimage


def smooth_gray(rng, h, w, sigma=2.0):
    """Band-limited random texture in [0.05, 0.95]."""
    g = ndimage.gaussian_filter(rng.random((h, w)), sigma)
    g = (g - g.min()) / max(g.max() - g.min(), 1e-12)
    return 0.05 + 0.9 * g


def fractal_gray(rng, h, w):
    """Multi-octave random texture: content at all wavelengths, so warps of
    several pixels stay unambiguous (no quasi-periodic locking)."""
    acc = np.zeros((h, w))
    for sigma, amp in [(1.5, 0.25), (4, 0.5), (10, 1.0), (24, 1.5)]:
        acc += amp * sigma**0.5 * ndimage.gaussian_filter(
            rng.standard_normal((h, w)), sigma)
    acc = (acc - acc.min()) / max(acc.max() - acc.min(), 1e-12)
    return 0.05 + 0.9 * acc


def textured_rgb(rng, h, w, sigma=2.0):
    img = np.dstack([smooth_gray(rng, h, w, sigma) for _ in range(3)])
    return img


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
