"""Retrieval and alignment descriptors: a 512-d Gabor scene descriptor and a
16-bin flow histogram for candidate search, plus a dense per-pixel SIFT grid
for scene alignment."""

from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .imageops import resize, to_grayscale
from .validation import check_image_rgb

GIST_SCALES = 4
GIST_ORIENTATIONS = 8
GIST_BLOCKS = 4
GIST_SIZE = GIST_SCALES * GIST_ORIENTATIONS * GIST_BLOCKS * GIST_BLOCKS  # 512
_GIST_WORKING = 128  # internal square resolution for the filter bank

FLOW_HIST_SIZE = 16  # 8 orientation octants x 2 magnitude bins
FLOW_MAG_SPLIT = 1.0  # pixels

SIFT_ORIENTATIONS = 8
SIFT_GRID = 4  # 4x4 cells -> 128 components
SIFT_CLAMP = 0.2

MATCH_FLOW_WEIGHT = 0.5


class Features(NamedTuple):
    """Global features used to rank database candidates."""

    gist: np.ndarray
    flow_hist: Optional[np.ndarray] = None


def _gabor_bank(size):
    """Frequency-domain oriented bandpass bank, 4 scales x 8 orientations.

    Filters are one-sided Gaussians in the frequency plane with the DC bin
    forced to zero, so flat images produce exactly zero energy.
    """
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    bank = []
    for s in range(GIST_SCALES):
        f0 = 0.25 / (2.0**s)
        sigma = f0 / 2.0
        for o in range(GIST_ORIENTATIONS):
            theta = o * np.pi / GIST_ORIENTATIONS
            cx, cy = f0 * np.cos(theta), f0 * np.sin(theta)
            h = np.exp(-((fx - cx) ** 2 + (fy - cy) ** 2) / (2.0 * sigma**2))
            h[0, 0] = 0.0
            bank.append(h)
    return np.stack(bank)


_BANK_CACHE = {}


def compute_gist(img):
    """512-d scene descriptor: bandpass energies averaged on a 4x4 grid,
    concatenated over 32 filters and L2-normalized."""
    img = check_image_rgb(img)
    if img.shape[0] < 32 or img.shape[1] < 32:
        raise ValueError(f"image too small for scene descriptor: {img.shape[:2]}")
    gray = resize(to_grayscale(img), (_GIST_WORKING, _GIST_WORKING))

    if _GIST_WORKING not in _BANK_CACHE:
        _BANK_CACHE[_GIST_WORKING] = _gabor_bank(_GIST_WORKING)
    bank = _BANK_CACHE[_GIST_WORKING]

    spectrum = np.fft.fft2(gray)
    block = _GIST_WORKING // GIST_BLOCKS
    desc = np.empty(GIST_SIZE)
    for k, h in enumerate(bank):
        energy = np.abs(np.fft.ifft2(spectrum * h))
        pooled = energy.reshape(GIST_BLOCKS, block, GIST_BLOCKS, block).mean(axis=(1, 3))
        desc[k * 16:(k + 1) * 16] = pooled.ravel()
    norm = np.linalg.norm(desc)
    if norm > 1e-12:
        desc = desc / norm
    else:
        desc = np.zeros(GIST_SIZE)
    return desc


def compute_dense_sift(img, cell=4):
    """Per-pixel 128-d SIFT grid: 8 orientation bins over a 4x4 cell
    neighborhood, normalized / clamped at 0.2 / renormalized.

    Returns an (H, W, 128) float32 array; flat regions yield zero vectors.
    """
    img = check_image_rgb(img)
    h, w = img.shape[:2]
    if h < SIFT_GRID * cell or w < SIFT_GRID * cell:
        raise ValueError(
            f"image {w}x{h} too small for dense SIFT with cell={cell}"
        )
    gray = to_grayscale(img)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ori = np.mod(np.arctan2(gy, gx), 2 * np.pi)

    # soft-assign magnitude between the two adjacent orientation bins
    pos = ori * (SIFT_ORIENTATIONS / (2 * np.pi))
    b0 = np.floor(pos).astype(np.int64) % SIFT_ORIENTATIONS
    frac = pos - np.floor(pos)
    maps = np.zeros((SIFT_ORIENTATIONS, h, w), dtype=np.float32)
    for b in range(SIFT_ORIENTATIONS):
        maps[b] += np.where(b0 == b, mag * (1 - frac), 0)
        maps[b] += np.where((b0 + 1) % SIFT_ORIENTATIONS == b, mag * frac, 0)
    for b in range(SIFT_ORIENTATIONS):
        maps[b] = ndimage.uniform_filter(maps[b], size=cell, mode="constant")

    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    desc = np.empty((h, w, SIFT_GRID * SIFT_GRID * SIFT_ORIENTATIONS),
                    dtype=np.float32)
    idx = 0
    for cy in range(SIFT_GRID):
        dy = int(round((cy - (SIFT_GRID - 1) / 2.0) * cell))
        yy = np.clip(ys + dy, 0, h - 1)
        for cx in range(SIFT_GRID):
            dx = int(round((cx - (SIFT_GRID - 1) / 2.0) * cell))
            xx = np.clip(xs + dx, 0, w - 1)
            for b in range(SIFT_ORIENTATIONS):
                desc[:, :, idx] = maps[b][yy, xx]
                idx += 1

    norm = np.linalg.norm(desc, axis=2, keepdims=True)
    np.divide(desc, norm, out=desc, where=norm > 1e-12)
    np.minimum(desc, SIFT_CLAMP, out=desc)
    norm = np.linalg.norm(desc, axis=2, keepdims=True)
    np.divide(desc, norm, out=desc, where=norm > 1e-12)
    np.minimum(desc, SIFT_CLAMP, out=desc)
    return desc


def compute_flow_histogram(flow):
    """16-bin histogram of flow vectors: orientation octant x (<1px, >=1px),
    L1-normalized over valid pixels. Zero vectors fall in octant 0, small."""
    u, v, valid = flow.u, flow.v, flow.valid
    if not valid.any():
        return np.zeros(FLOW_HIST_SIZE)
    uu = u[valid]
    vv = v[valid]
    mag = np.hypot(uu, vv)
    octant = np.floor(np.mod(np.arctan2(vv, uu), 2 * np.pi) / (np.pi / 4))
    octant = np.clip(octant.astype(np.int64), 0, 7)
    octant[mag == 0] = 0
    large = (mag >= FLOW_MAG_SPLIT).astype(np.int64)
    hist = np.bincount(octant * 2 + large, minlength=FLOW_HIST_SIZE).astype(np.float64)
    return hist / hist.sum()


def match_distance(a, b):
    """Ranking key for candidate retrieval: squared L2 distance of the scene
    descriptors plus a weighted squared L2 distance of the flow histograms.
    The flow term is dropped when either side lacks motion features."""
    d = float(np.sum((a.gist - b.gist) ** 2))
    if a.flow_hist is not None and b.flow_hist is not None:
        d += MATCH_FLOW_WEIGHT * float(np.sum((a.flow_hist - b.flow_hist) ** 2))
    return d
