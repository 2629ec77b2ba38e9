import numpy as np
import pytest

from depthtransfer.imageops import DepthMap, to_grayscale, warp_bilinear
from depthtransfer.motionseg import (
    MotionMask,
    extract_background,
    floor_contact,
    normalize_exposure,
    relative_difference_statistic,
    segment_frames,
    stabilize,
)

from conftest import fractal_gray, textured_rgb


def _rgb(gray):
    return np.dstack([gray, gray, gray])


def _mover_sequence(rng, frames=15, h=72, w=96, square=20, step=3,
                    gain=None):
    """Static fractal background with a bright square moving right.

    The clip is long enough that every pixel sees the background in a
    majority of frames, so the temporal median recovers it.
    """
    bg = fractal_gray(rng, h, w) * 0.6 + 0.1  # keep headroom for the square
    seq, truths = [], []
    for t in range(frames):
        frame = bg.copy()
        x0 = 6 + step * t
        y0 = h // 2 - square // 2
        frame[y0:y0 + square, x0:x0 + square] = 0.95
        truth = np.zeros((h, w), bool)
        truth[y0:y0 + square, x0:x0 + square] = True
        if gain:
            frame = np.clip(frame * gain, 0, 1)
        seq.append(_rgb(frame))
        truths.append(truth)
    return seq, truths


def _iou(a, b):
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 1.0


def test_normalize_exposure_identity(rng):
    frames = [textured_rgb(rng, 32, 32)] * 3
    out = normalize_exposure(frames)
    for f in out:
        assert np.abs(f - frames[0]).max() <= 1.0 / 255 + 1e-9


def test_normalize_exposure_single_frame(rng):
    frame = textured_rgb(rng, 32, 32)
    out = normalize_exposure([frame])
    assert np.allclose(out[0], frame)


def test_normalize_exposure_undoes_gain(rng):
    dark = textured_rgb(rng, 48, 48) * 0.7
    bright = np.clip(dark * 1.3, 0, 1)
    out = normalize_exposure([dark, bright])
    assert np.abs(out[0] - dark).max() <= 1e-9  # reference kept as-is
    assert np.abs(out[1] - dark).mean() <= 2.0 / 255


def test_stabilize_static_sequence(rng):
    frame = _rgb(fractal_gray(rng, 96, 128))
    stab = stabilize([frame] * 4)
    for h in stab.homographies:
        assert np.abs(h - np.eye(3)).max() <= 1e-2


def test_stabilize_recovers_known_homographies(rng):
    base = _rgb(fractal_gray(rng, 120, 160))
    truths = []
    frames = []
    for t in range(4):
        angle = np.deg2rad(1.2 * (t - 1.5))
        c, s = np.cos(angle), np.sin(angle)
        cx, cy = 80, 60
        gt = np.array([[c, -s, cx - c * cx + s * cy + 1.5 * t],
                       [s, c, cy - s * cx - c * cy],
                       [0, 0, 1.0]])
        truths.append(gt)
        warped, _cov = warp_bilinear(base, gt)
        frames.append(np.clip(warped, 0, 1))
    stab = stabilize(frames)
    assert stab.fallbacks == []
    ref = len(frames) // 2

    # reprojection against the ground-truth chain on interior grid points
    xs, ys = np.meshgrid(np.arange(30, 140, 10), np.arange(30, 100, 10))
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    for t in range(4):
        gt_chain = truths[ref] @ np.linalg.inv(truths[t])
        est = stab.homographies[t]
        p1 = gt_chain @ pts
        p2 = est @ pts
        p1 = p1[:2] / p1[2]
        p2 = p2[:2] / p2[2]
        err = np.hypot(*(p1 - p2))
        assert np.median(err) <= 0.5


def test_stabilize_ignores_small_mover(rng):
    seq, _ = _mover_sequence(rng, frames=4)
    stab = stabilize(seq)
    for h in stab.homographies:
        assert np.abs(h - np.eye(3)).max() <= 2e-2


def test_stabilize_fallback_on_featureless_frames():
    flat = [np.full((48, 48, 3), 0.5)] * 3
    stab = stabilize(flat)
    assert len(stab.fallbacks) == 2
    for h in stab.homographies:
        assert np.allclose(h, np.eye(3))


def test_extract_background_identical_frames(rng):
    g = fractal_gray(rng, 24, 24)
    cov = np.ones((24, 24), bool)
    bg, valid = extract_background([g, g, g], [cov, cov, cov])
    assert valid.all()
    assert np.allclose(bg, g)


def test_extract_background_majority(rng):
    g = fractal_gray(rng, 24, 24)
    frames = [g.copy() for _ in range(7)]
    for t in (2, 5):  # occluder visible in 2 of 7 frames
        frames[t] = g.copy()
        frames[t][10, 10] = 0.99
    cov = [np.ones((24, 24), bool)] * 7
    bg, _ = extract_background(frames, cov)
    assert bg[10, 10] == pytest.approx(g[10, 10])


def test_extract_background_matches_sort_oracle(rng):
    frames = [rng.random((10, 12)) for _ in range(6)]
    covers = [rng.random((10, 12)) > 0.25 for _ in range(6)]
    covers[0] |= True  # guarantee coverage everywhere
    bg, valid = extract_background(frames, covers)
    for y in range(10):
        for x in range(12):
            vals = sorted(frames[t][y, x] for t in range(6) if covers[t][y, x])
            if not vals:
                assert not valid[y, x]
                continue
            n = len(vals)
            med = (vals[n // 2] if n % 2 == 1
                   else 0.5 * (vals[n // 2 - 1] + vals[n // 2]))
            assert bg[y, x] == pytest.approx(med, abs=1e-12)


def test_relative_difference_statistic_arithmetic():
    stat = relative_difference_statistic(
        np.array([[0.8]]), np.array([[0.5]]), np.array([[0.1]]))
    assert stat[0, 0] == pytest.approx(0.1 * (0.09 / 0.5), abs=1e-12)
    assert stat[0, 0] > 0.01  # crosses the motion threshold

    # background floor guards the division
    stat = relative_difference_statistic(
        np.array([[0.5]]), np.array([[0.0]]), np.array([[1.0]]))
    assert np.isfinite(stat[0, 0])
    assert stat[0, 0] == pytest.approx(0.25 / 0.01, abs=1e-9)


def test_segment_static_sequence_is_empty(rng):
    frame = _rgb(fractal_gray(rng, 64, 80))
    masks = segment_frames([frame] * 5)
    assert all(not m.any() for m in masks)


def test_segment_moving_square_iou(rng):
    seq, truths = _mover_sequence(rng)
    masks = segment_frames(seq)
    for m, truth in zip(masks, truths):
        assert _iou(m.mask, truth) >= 0.8


def test_segment_masks_invariant_to_exposure_gain(rng):
    seq, _ = _mover_sequence(rng)
    rng2 = np.random.default_rng(1234)
    gained, _ = _mover_sequence(rng2, gain=1.25)
    base_masks = segment_frames(seq)
    gain_masks = segment_frames(gained)
    for a, b in zip(base_masks, gain_masks):
        assert _iou(a.mask, b.mask) >= 0.95


def _mask_from(labels):
    return MotionMask(labels > 0, labels)


def test_floor_contact_constant_floor():
    labels = np.zeros((40, 40), np.int32)
    labels[10:20, 15:25] = 1
    depth = DepthMap(np.full((40, 40), 4.0), None)
    values, defined = floor_contact(_mask_from(labels), depth)
    assert defined[12, 18]
    assert np.allclose(values[labels == 1], 4.0)
    assert not defined[labels == 0].any()


def test_floor_contact_two_components_no_bleed():
    labels = np.zeros((40, 60), np.int32)
    labels[10:18, 5:15] = 1
    labels[10:18, 40:50] = 2
    depth_vals = np.full((40, 60), 9.0)
    depth_vals[18:24, 0:30] = 3.0   # floor band under component 1
    depth_vals[18:24, 30:60] = 6.0  # floor band under component 2
    depth = DepthMap(depth_vals, None)
    values, defined = floor_contact(_mask_from(labels), depth)
    assert np.allclose(values[labels == 1], 3.0)
    assert np.allclose(values[labels == 2], 6.0)
    assert defined[labels > 0].all()


def test_floor_contact_empty_mask():
    labels = np.zeros((10, 10), np.int32)
    depth = DepthMap(np.full((10, 10), 2.0), None)
    values, defined = floor_contact(_mask_from(labels), depth)
    assert not defined.any()
