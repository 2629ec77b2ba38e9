"""Stereoscopic view synthesis from inferred depth: inverse-depth disparity
mapping, forward-splat rendering of the second view with background-extension
hole filling, anaglyph/side-by-side composition and flow-guided temporal
smoothing of disparity."""

from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .imageops import DepthMap, bilinear_sample
from .validation import check_image_rgb, check_same_shape


@dataclass
class StereoParams:
    """Pop-out and convergence controls for the synthesized view."""

    max_disparity: float = 20.0  # pixels
    convergence_percentile: float = 50.0  # depth percentile mapped to 0

    def __post_init__(self):
        if self.max_disparity < 0:
            raise ValueError("max disparity must be >= 0")
        if not 0 <= self.convergence_percentile <= 100:
            raise ValueError("convergence percentile must be in [0, 100]")


def depth_to_disparity(depth, params=None):
    """Signed horizontal disparity proportional to inverse depth, anchored
    at the 1st/99th depth percentiles and shifted so the convergence depth
    maps to zero. Degenerate constant depth yields zero disparity."""
    params = params or StereoParams()
    if isinstance(depth, DepthMap):
        vals = depth.filled()
        pool = depth.values[depth.valid]
    else:
        vals = np.asarray(depth, dtype=np.float64)
        pool = vals.ravel()
    if pool.size == 0:
        return np.zeros(vals.shape)
    d_near = float(np.percentile(pool, 1))
    d_far = float(np.percentile(pool, 99))
    if d_far - d_near < 1e-9 or d_near <= 0:
        return np.zeros(vals.shape)
    inv_near, inv_far = 1.0 / d_near, 1.0 / d_far
    inv = 1.0 / np.clip(vals, d_near, d_far)
    raw = params.max_disparity * (inv - inv_far) / (inv_near - inv_far)
    d_conv = float(np.clip(np.percentile(pool, params.convergence_percentile),
                           d_near, d_far))
    shift = params.max_disparity * (1.0 / d_conv - inv_far) / (inv_near - inv_far)
    return raw - shift


@numba.njit(cache=True)
def _splat(img, disp, out, zbuf, xbuf, filled):
    h, w, c = img.shape
    for y in range(h):
        for x in range(w):
            tx = int(round(x + disp[y, x]))
            if tx < 0 or tx >= w:
                continue
            d = disp[y, x]
            # nearer content (larger disparity) occludes; ties keep the
            # rightmost source pixel
            if (not filled[y, tx]) or d > zbuf[y, tx] or (
                    d == zbuf[y, tx] and x >= xbuf[y, tx]):
                for k in range(c):
                    out[y, tx, k] = img[y, x, k]
                zbuf[y, tx] = d
                xbuf[y, tx] = x
                filled[y, tx] = True


def _fill_holes(out, disp_at, holes):
    """Extend the neighboring value with smaller disparity into each hole,
    then apply a 3x3 median restricted to the filled pixels."""
    h, w = holes.shape
    for y in range(h):
        row_holes = np.flatnonzero(holes[y])
        if row_holes.size == 0:
            continue
        covered = np.flatnonzero(~holes[y])
        if covered.size == 0:
            continue
        pos = np.searchsorted(covered, row_holes)
        left = covered[np.clip(pos - 1, 0, covered.size - 1)]
        right = covered[np.clip(pos, 0, covered.size - 1)]
        has_left = pos > 0
        has_right = pos < covered.size
        use_left = has_left & (~has_right
                               | (disp_at[y, left] <= disp_at[y, right]))
        src = np.where(use_left, left, right)
        out[y, row_holes] = out[y, src]
    med = np.dstack([ndimage.median_filter(out[:, :, k], size=3,
                                           mode="nearest")
                     for k in range(out.shape[2])])
    out[holes] = med[holes]
    return out


def render_view(img, disparity):
    """Forward-warp the input by its disparity with nearest-depth-wins
    conflict resolution; holes are filled by horizontal background
    extension. Returns (view, hole_mask)."""
    img = check_image_rgb(img)
    disparity = np.asarray(disparity, dtype=np.float64)
    check_same_shape(img, disparity, "image", "disparity")
    h, w = disparity.shape
    out = np.zeros_like(img)
    zbuf = np.full((h, w), -np.inf)
    xbuf = np.zeros((h, w), dtype=np.int64)
    filled = np.zeros((h, w), dtype=np.bool_)
    _splat(img, disparity, out, zbuf, xbuf, filled)
    holes = ~filled
    if holes.any():
        disp_at = np.where(filled, zbuf, 0.0)
        out = _fill_holes(out, disp_at, holes)
    return np.clip(out, 0.0, 1.0), holes


def compose_anaglyph(left, right):
    """Red-cyan composite: red from the left view, green/blue from the
    right view."""
    left = check_image_rgb(left)
    right = check_image_rgb(right)
    check_same_shape(left, right, "left", "right")
    out = left.copy()
    out[:, :, 1:] = right[:, :, 1:]
    return out


def compose_side_by_side(left, right):
    left = check_image_rgb(left)
    right = check_image_rgb(right)
    check_same_shape(left, right, "left", "right")
    return np.concatenate([left, right], axis=1)


def temporal_filter_disparity(disparities, flows, confidences=None):
    """3-tap flow-guided smoothing of a disparity sequence with weights
    0.25 / 0.5 / 0.25, neighbor taps gated by flow confidence. Single-frame
    input is returned unchanged."""
    t_frames = len(disparities)
    if t_frames <= 1:
        return [np.asarray(d, dtype=np.float64).copy() for d in disparities]
    if len(flows) != t_frames - 1:
        raise ValueError("need T-1 flow fields for T frames")
    h, w = np.asarray(disparities[0]).shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    out = []
    for t in range(t_frames):
        center = np.asarray(disparities[t], dtype=np.float64)
        acc = 0.5 * center
        wsum = np.full((h, w), 0.5)
        if t + 1 < t_frames:
            fl = flows[t]
            nxt, inside = bilinear_sample(np.asarray(disparities[t + 1]),
                                          xs + fl.u, ys + fl.v)
            gate = inside & fl.valid
            conf = confidences[t] if confidences is not None else 1.0
            wgt = 0.25 * np.asarray(conf) * gate
            acc += wgt * nxt
            wsum += wgt
        if t > 0:
            fl = flows[t - 1]  # approximate inverse correspondence
            prev, inside = bilinear_sample(np.asarray(disparities[t - 1]),
                                           xs - fl.u, ys - fl.v)
            gate = inside & fl.valid
            conf = confidences[t - 1] if confidences is not None else 1.0
            wgt = 0.25 * np.asarray(conf) * gate
            acc += wgt * prev
            wsum += wgt
        out.append(acc / wsum)
    return out
