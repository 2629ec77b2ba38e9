"""Procedural outdoor-style scenes with ground-truth depth.

Every scene is a ground plane receding to a horizon, a sky, and a few
standing objects whose depth equals the ground depth at their base. The
family shares global layout statistics (so retrieval finds genuinely similar
scenes) while varying horizon, object placement, palette and texture.
Depths span roughly 1-80 m like the Make3D range data.
"""

import numpy as np
from scipy import ndimage

from depthtransfer.imageops import DepthMap

SKY_DEPTH = 80.0
NEAR_DEPTH = 1.0


def _texture(rng, h, w, strength=0.08, sigma=2.0):
    t = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma)
    t /= max(np.abs(t).max(), 1e-9)
    return strength * t


def make_scene(seed, width, height, n_objects=None):
    """Returns (rgb image in [0, 1], DepthMap in meters)."""
    rng = np.random.default_rng(seed)
    h, w = height, width
    img = np.zeros((h, w, 3))
    depth = np.full((h, w), SKY_DEPTH)

    horizon = int(h * rng.uniform(0.30, 0.45))
    ys = np.arange(h)

    # sky: vertical gradient, bluish
    sky_top = np.array([0.55, 0.65, 0.85]) + rng.uniform(-0.08, 0.08, 3)
    sky_bot = np.array([0.80, 0.83, 0.90]) + rng.uniform(-0.05, 0.05, 3)
    for c in range(3):
        grad = np.interp(ys[:horizon], [0, max(horizon - 1, 1)],
                         [sky_top[c], sky_bot[c]])
        img[:horizon, :, c] = grad[:, None]

    # ground plane: depth ~ 1 / (y - horizon), textured surface
    focal_height = rng.uniform(35.0, 55.0)
    gy = ys[horizon:]
    ground_depth = np.clip(focal_height / np.maximum(gy - horizon + 1, 1),
                           NEAR_DEPTH, SKY_DEPTH)
    depth[horizon:, :] = ground_depth[:, None]
    ground_color = np.array([0.45, 0.42, 0.33]) + rng.uniform(-0.08, 0.08, 3)
    shade = np.interp(gy, [horizon, h - 1], [0.75, 1.1])
    for c in range(3):
        img[horizon:, :, c] = ground_color[c] * shade[:, None]

    # standing objects, sorted far to near so nearer ones overdraw
    if n_objects is None:
        n_objects = rng.integers(3, 7)
    bases = np.sort(rng.uniform(0.12, 0.95, n_objects))[::-1]
    for b in bases:
        base_row = horizon + int(b * (h - horizon - 1))
        obj_depth = float(depth[base_row, 0])
        obj_w = int(w * rng.uniform(0.06, 0.22))
        obj_h = int((base_row - horizon) * rng.uniform(0.5, 1.6)
                    + h * 0.08)
        x0 = rng.integers(0, max(w - obj_w, 1))
        y0 = max(base_row - obj_h, 0)
        color = rng.uniform(0.15, 0.85, 3)
        region = (slice(y0, base_row), slice(x0, x0 + obj_w))
        closer = depth[region] > obj_depth
        for c in range(3):
            img[region][..., c][closer] = color[c]
        depth[region][closer] = obj_depth

    img += _texture(rng, h, w, 0.06, 1.5)[..., None]
    img += _texture(rng, h, w, 0.05, 6.0)[..., None]
    img = np.clip(img, 0.0, 1.0)
    return img, DepthMap(np.clip(depth, NEAR_DEPTH, SKY_DEPTH), None)


def make_corpus(n, width, height, seed0=0):
    items = []
    for i in range(n):
        img, dep = make_scene(seed0 + i, width, height)
        items.append((f"scene_{seed0 + i:04d}", img, dep))
    return items


def make_mover_video(seed, width, height, frames=10, mover_depth_frac=0.6,
                     step=None):
    """Static scene plus a moving box standing on the ground.

    Returns (frames, gt_depths, mover_masks, floor_depth): the box moves
    horizontally at constant ground contact, so its true depth equals the
    ground depth at its base row.
    """
    rng = np.random.default_rng(seed)
    base_img, base_depth = make_scene(seed, width, height, n_objects=2)
    h, w = height, width
    horizon = np.argmax(base_depth.values[:, 0] < SKY_DEPTH)

    base_row = int(horizon + mover_depth_frac * (h - horizon - 1))
    floor_depth = float(base_depth.values[base_row, 0])
    box_h = max(int(h * 0.18), 8)
    box_w = max(int(w * 0.10), 6)
    if step is None:
        step = max(2, w // (frames * 6))
    x_start = int(w * 0.15)
    color = np.array([0.9, 0.25, 0.2])

    seq, gts, masks = [], [], []
    for t in range(frames):
        x0 = x_start + t * step
        y0 = base_row - box_h
        frame = base_img.copy()
        gt = base_depth.values.copy()
        mask = np.zeros((h, w), bool)
        region = (slice(y0, base_row), slice(x0, min(x0 + box_w, w)))
        closer = gt[region] > floor_depth
        for c in range(3):
            frame[region][..., c][closer] = color[c]
        gt[region][closer] = floor_depth
        mask[region] = closer
        noise = rng.normal(0, 0.004, (h, w, 1))
        seq.append(np.clip(frame + noise, 0, 1))
        gts.append(DepthMap(gt, None))
        masks.append(mask)
    return seq, gts, masks, floor_depth
