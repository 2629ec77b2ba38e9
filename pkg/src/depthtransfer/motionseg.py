"""Moving-object detection for non-translating videos.

Pipeline: equalize exposure against the darkest frame, stabilize the
sequence onto a middle reference frame with RANSAC-fitted homographies,
median-filter the stabilized stack into a background image, then flag pixels
whose flow-weighted relative difference from the background exceeds a
threshold. Masks are mapped back into each original frame and cleaned with
small morphological operations.
"""

from dataclasses import dataclass
from typing import NamedTuple

import cv2
import numpy as np
from scipy import ndimage

from .flow import estimate_flow
from .imageops import histogram_match, to_grayscale, warp_bilinear
from .validation import check_homography, check_image_rgb

MOTION_THRESHOLD = 0.01  # on ||flow|| * ||W - B||^2 / B
BACKGROUND_FLOOR = 0.01  # guards the division by background intensity
MIN_COMPONENT = 25  # pixels
RANSAC_THRESHOLD = 2.0  # pixels
RANSAC_ITERS = 1000
RANSAC_CONFIDENCE = 0.995
MIN_CORRESPONDENCES = 8


@dataclass
class MotionMask:
    """Binary motion mask with 4-connected component labels (0 = static)."""

    mask: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int32)

    @property
    def n_components(self):
        return int(self.labels.max())

    def any(self):
        return bool(self.mask.any())


class Stabilization(NamedTuple):
    homographies: list  # frame t -> reference frame
    warped: list  # frames resampled into the reference frame
    coverage: list  # bool masks of in-bounds samples
    fallbacks: list  # frames whose pairwise fit fell back to identity


def normalize_exposure(frames):
    """Histogram-match every frame (per channel) to the darkest frame of the
    sequence, so exposure drift does not masquerade as motion."""
    frames = [check_image_rgb(f) for f in frames]
    if len(frames) == 0:
        raise ValueError("need at least one frame")
    if len(frames) == 1:
        return [frames[0].copy()]
    means = [to_grayscale(f).mean() for f in frames]
    ref_idx = int(np.argmin(means))
    ref = frames[ref_idx]
    out = []
    for i, f in enumerate(frames):
        if i == ref_idx:
            out.append(f.copy())
            continue
        matched = np.dstack([
            histogram_match(f[:, :, c], ref[:, :, c]) for c in range(3)])
        out.append(matched)
    return out


def _to_u8(gray):
    return np.clip(gray * 255.0, 0, 255).astype(np.uint8)


def _pairwise_homography(gray_a, gray_b, orb, matcher):
    """Dominant motion a -> b from corner descriptors; None when there are
    too few matches for a trustworthy fit."""
    ka, da = orb.detectAndCompute(_to_u8(gray_a), None)
    kb, db = orb.detectAndCompute(_to_u8(gray_b), None)
    if da is None or db is None or len(ka) < MIN_CORRESPONDENCES:
        return None
    matches = matcher.match(da, db)
    if len(matches) < MIN_CORRESPONDENCES:
        return None
    src = np.float32([ka[m.queryIdx].pt for m in matches]).reshape(-1, 1, 2)
    dst = np.float32([kb[m.trainIdx].pt for m in matches]).reshape(-1, 1, 2)
    h, inliers = cv2.findHomography(
        src, dst, cv2.RANSAC, RANSAC_THRESHOLD,
        maxIters=RANSAC_ITERS, confidence=RANSAC_CONFIDENCE)
    if h is None or inliers is None or inliers.sum() < MIN_CORRESPONDENCES:
        return None
    return h / h[2, 2]


def stabilize(frames):
    """Register all frames onto the middle frame. Pairs that cannot be
    matched reliably fall back to the identity homography and are listed in
    the result's `fallbacks`."""
    frames = [check_image_rgb(f) for f in frames]
    if len(frames) < 2:
        raise ValueError("stabilization needs at least two frames")
    grays = [to_grayscale(f) for f in frames]
    orb = cv2.ORB_create(nfeatures=1500)
    matcher = cv2.BFMatcher(cv2.NORM_HAMMING, crossCheck=True)

    t_frames = len(frames)
    fallbacks = []
    pairwise = []  # homography mapping frame t coords into frame t+1
    for t in range(t_frames - 1):
        h = _pairwise_homography(grays[t], grays[t + 1], orb, matcher)
        if h is None:
            h = np.eye(3)
            fallbacks.append(t)
        pairwise.append(h)

    ref = t_frames // 2
    homs = [None] * t_frames
    homs[ref] = np.eye(3)
    for t in range(ref - 1, -1, -1):
        homs[t] = homs[t + 1] @ pairwise[t]
    for t in range(ref + 1, t_frames):
        homs[t] = homs[t - 1] @ np.linalg.inv(pairwise[t - 1])
    homs = [check_homography(h) for h in homs]

    warped, coverage = [], []
    for t in range(t_frames):
        wf, cov = warp_bilinear(frames[t], homs[t])
        warped.append(wf)
        coverage.append(cov)
    return Stabilization(homs, warped, coverage, fallbacks)


def extract_background(warped, coverage):
    """Per-pixel temporal median over covered samples. Returns
    (background, valid); pixels never covered are flagged invalid."""
    stack = np.stack([np.asarray(w, dtype=np.float64) for w in warped])
    cov = np.stack([np.asarray(c, dtype=bool) for c in coverage])
    if stack.ndim == 4:
        cov_b = cov[..., None]
    else:
        cov_b = cov
    masked = np.where(cov_b, stack, np.nan)
    with np.errstate(all="ignore"):
        bg = np.nanmedian(masked, axis=0)
    valid = cov.any(axis=0)
    bg = np.where(valid if stack.ndim == 3 else valid[..., None],
                  bg, 0.0)
    return bg, valid


def _disk(radius):
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (xx**2 + yy**2) <= radius**2


def _clean_mask(mask):
    mask = ndimage.binary_opening(mask, structure=_disk(1))
    mask = ndimage.binary_closing(mask, structure=_disk(2))
    labels, count = ndimage.label(mask)  # default structure: 4-connected
    if count:
        sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
        small = np.flatnonzero(sizes < MIN_COMPONENT) + 1
        if small.size:
            mask[np.isin(labels, small)] = False
    labels, _ = ndimage.label(mask)
    return MotionMask(mask, labels)


def relative_difference_statistic(gray, background, flow_magnitude):
    """Flow-weighted relative difference ||flow|| * ||W - B||^2 / B, with the
    background floored to keep the division bounded."""
    denom = np.maximum(np.asarray(background, dtype=np.float64),
                       BACKGROUND_FLOOR)
    diff2 = (np.asarray(gray, dtype=np.float64) - background) ** 2
    return np.asarray(flow_magnitude, dtype=np.float64) * diff2 / denom


def segment(warped, flows, background, homographies, bg_valid=None,
            tau=MOTION_THRESHOLD):
    """Relative differencing against the background: a stabilized pixel is
    moving when ||flow|| * ||W - B||^2 / B exceeds tau. The raw masks live in
    the reference frame and are warped back into each original frame by the
    inverse homography before cleanup."""
    t_frames = len(warped)
    grays = [w if np.asarray(w).ndim == 2 else to_grayscale(np.clip(w, 0, 1))
             for w in warped]
    bg = background if np.asarray(background).ndim == 2 else to_grayscale(
        np.clip(background, 0, 1))
    if bg_valid is None:
        bg_valid = np.ones(bg.shape, dtype=bool)

    mags = []
    for t in range(t_frames):
        if t < len(flows):
            mags.append(flows[t].magnitude())
        else:
            mags.append(flows[-1].magnitude())  # last frame reuses the pair

    out = []
    for t in range(t_frames):
        statistic = relative_difference_statistic(grays[t], bg, mags[t])
        raw = (statistic > tau) & bg_valid
        back, _cov = warp_bilinear(raw.astype(np.float64),
                                   np.linalg.inv(homographies[t]))
        out.append(_clean_mask(back > 0.5))
    return out


def segment_frames(frames, tau=MOTION_THRESHOLD):
    """Full segmentation pipeline on raw frames; returns per-frame masks in
    the original frame coordinates."""
    frames = normalize_exposure(frames)
    stab = stabilize(frames)
    grays = [to_grayscale(np.clip(w, 0, 1)) for w in stab.warped]
    bg, bg_valid = extract_background(grays, stab.coverage)
    filled = [np.where(cov, g, bg) for g, cov in zip(grays, stab.coverage)]
    filled = [np.clip(g, 0, 1) for g in filled]
    flows = [estimate_flow(filled[t], filled[t + 1])
             for t in range(len(filled) - 1)]
    return segment(grays, flows, bg, stab.homographies, bg_valid, tau)


def floor_contact(motion_mask, first_pass_depth, band=5):
    """Depth at which each moving component touches the floor: the median
    first-pass depth of static pixels in a small band below the component's
    lowest row (falling back to the contact row itself), broadcast over the
    component. Returns (values, defined)."""
    labels = motion_mask.labels
    h, w = labels.shape
    values = np.ones((h, w))
    defined = np.zeros((h, w), dtype=bool)
    depth = first_pass_depth.values
    static = ~motion_mask.mask

    for comp in range(1, motion_mask.n_components + 1):
        ys, xs = np.nonzero(labels == comp)
        if ys.size == 0:
            continue
        contact_row = ys.max()
        row_cols = xs[ys == contact_row]
        x0, x1 = row_cols.min(), row_cols.max()
        y0 = min(contact_row + 1, h - 1)
        y1 = min(contact_row + band, h - 1)
        region = np.zeros((h, w), dtype=bool)
        region[y0:y1 + 1, x0:x1 + 1] = True
        region &= static & first_pass_depth.valid
        if region.any():
            m = float(np.median(depth[region]))
        else:
            m = float(np.median(depth[contact_row, x0:x1 + 1]))
        m = max(m, 1e-6)
        sel = labels == comp
        values[sel] = m
        defined[sel] = True
    return values, defined
