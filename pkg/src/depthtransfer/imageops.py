"""Raster primitives: grayscale, gradients, bilinear warping, histogram
specification and Gaussian pyramids.

Conventions used package-wide: arrays are indexed [row, col] = [y, x],
coordinates are (x, y) with x along the width. Spatial gradients are forward
differences with a zero boundary on the last column/row, which keeps every
derivative operator a simple shift-and-subtract (and its adjoint the mirrored
backward difference).
"""

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from .validation import check_gray, check_homography, check_image_rgb

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class DepthMap:
    """Per-pixel scene depth in meters with an explicit validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"depth must be (H, W), got {self.values.shape}")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ValueError("depth and validity mask must share dimensions")
        vals = self.values[self.valid]
        if vals.size and (not np.isfinite(vals).all() or vals.min() <= 0):
            raise ValueError("valid depths must be finite and > 0")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def mean_valid(self):
        """Mean depth over valid pixels (1.0 fallback for an empty mask)."""
        vals = self.values[self.valid]
        return float(vals.mean()) if vals.size else 1.0

    def filled(self, fill=None):
        """Values with invalid pixels replaced (default: mean valid depth)."""
        if fill is None:
            fill = self.mean_valid()
        return np.where(self.valid, self.values, fill)

    def copy(self):
        return DepthMap(self.values.copy(), self.valid.copy())


def to_grayscale(img):
    """Luminance 0.299 R + 0.587 G + 0.114 B."""
    img = check_image_rgb(img)
    return img @ GRAY_WEIGHTS


def gradients(img):
    """Forward differences (gx, gy), zero on the last column/row."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"gradients need at least 2x2 input, got {img.shape}")
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    return gx, gy


def bilinear_sample(field, xs, ys):
    """Sample a raster at float coordinates.

    Returns (values, inside): bilinear interpolation of `field` at (xs, ys),
    with `inside` false wherever the sample point leaves [0, W-1] x [0, H-1]
    (those values are returned as 0).
    """
    field = np.asarray(field, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    h, w = field.shape[:2]
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)

    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(xs, 0, w - 1) - x0
    fy = np.clip(ys, 0, h - 1) - y0

    if field.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = field[y0, x0]
    v01 = field[y0, x1]
    v10 = field[y1, x0]
    v11 = field[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    out = top * (1 - fy) + bot * fy
    mask = inside if field.ndim == 2 else inside[..., None]
    return np.where(mask, out, 0.0), inside


def warp_bilinear(raster, h):
    """Warp a raster by a homography: output(x, y) = raster(h^-1 (x, y)).

    Works for single- and multi-channel rasters; returns (warped, coverage)
    where coverage marks output pixels whose source sample stayed in bounds.
    """
    raster = np.asarray(raster, dtype=np.float64)
    h = check_homography(h)
    hinv = np.linalg.inv(h)
    height, width = raster.shape[:2]
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    denom = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / denom
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / denom
    return bilinear_sample(raster, sx, sy)


def histogram_match(src, reference, bins=256):
    """Histogram specification: map src so its CDF follows the reference.

    Uses mid-rank source quantiles so a constant image lands on the
    reference's median bin instead of its extreme.
    """
    src = check_gray(src, "src")
    reference = check_gray(reference, "reference")

    src_q = np.clip((src * (bins - 1)).round().astype(np.int64), 0, bins - 1)
    ref_q = np.clip((reference * (bins - 1)).round().astype(np.int64), 0, bins - 1)

    src_hist = np.bincount(src_q.ravel(), minlength=bins).astype(np.float64)
    ref_hist = np.bincount(ref_q.ravel(), minlength=bins).astype(np.float64)
    src_cdf = np.cumsum(src_hist) / src_hist.sum()
    ref_cdf = np.cumsum(ref_hist) / ref_hist.sum()

    # mid-rank quantile of each source bin
    src_mid = src_cdf - src_hist / (2.0 * src_hist.sum())
    mapping = np.searchsorted(ref_cdf, src_mid, side="left")
    mapping = np.clip(mapping, 0, bins - 1)
    return mapping[src_q] / (bins - 1.0)


def gaussian_blur(raster, sigma):
    """Gaussian smoothing with edge replication (preserves constants)."""
    if sigma <= 0:
        return np.asarray(raster, dtype=np.float64).copy()
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim == 3:
        return ndimage.gaussian_filter(raster, (sigma, sigma, 0), mode="nearest")
    return ndimage.gaussian_filter(raster, sigma, mode="nearest")


def resize(raster, size):
    """Bilinear resize to (width, height); channels preserved."""
    raster = np.asarray(raster, dtype=np.float64)
    w, h = size
    interp = cv2.INTER_AREA if w < raster.shape[1] else cv2.INTER_LINEAR
    return cv2.resize(raster, (int(w), int(h)), interpolation=interp)


def build_pyramid(raster, levels, factor=0.5):
    """Gaussian pyramid: level 0 is the input, each next level blurred and
    resampled by `factor`. Rejects pyramids whose coarsest level drops
    below 8x8."""
    raster = np.asarray(raster, dtype=np.float64)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if not 0 < factor < 1:
        raise ValueError("factor must lie in (0, 1)")
    h, w = raster.shape[:2]
    for k in range(1, levels):
        h, w = int(round(h * factor)), int(round(w * factor))
    if h < 8 or w < 8:
        raise ValueError(
            f"coarsest pyramid level {w}x{h} is below the 8x8 minimum"
        )
    sigma = 0.5 * np.sqrt(max(1.0 / factor**2 - 1.0, 0.0))
    pyramid = [raster]
    for _ in range(1, levels):
        prev = pyramid[-1]
        ph, pw = prev.shape[:2]
        nh, nw = int(round(ph * factor)), int(round(pw * factor))
        blurred = gaussian_blur(prev, sigma)
        pyramid.append(resize(blurred, (nw, nh)))
    return pyramid


def soft_threshold(x, midpoint=0.05, slope=0.01):
    """Decreasing sigmoid (1 + exp((x - midpoint) / slope))^-1.

    Shared by the edge-aware smoothness weights and the flow/warp confidence
    weights: near 1 below the midpoint, near 0 above it.
    """
    z = np.clip((np.asarray(x, dtype=np.float64) - midpoint) / slope, -500, 500)
    return 1.0 / (1.0 + np.exp(z))


def resample_depth(depth, size):
    """Resize a DepthMap to (width, height), keeping holes explicit."""
    w, h = size
    filled = depth.filled()
    values = resize(filled, (w, h))
    valid = resize(depth.valid.astype(np.float64), (w, h)) > 0.5
    values = np.maximum(values, 1e-6)
    return DepthMap(values, valid)
