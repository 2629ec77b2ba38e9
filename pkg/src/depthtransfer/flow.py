"""Coarse-to-fine variational optical flow between consecutive frames, the
flow-difference operator and its confidence weight."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imageops import bilinear_sample, build_pyramid, resize, soft_threshold
from .validation import check_gray, check_same_shape

SMOOTHNESS = 0.02  # relative to [0, 1] luminance
LEVELS = 5
FACTOR = 0.5
WARP_ITERS = 3
SOLVER_SWEEPS = 30
CHARBONNIER_EPS = 1e-2  # smaller values fragment the field on flat texture
SOR_OMEGA = 1.85
COARSEST_SIZE = 12  # pixels, pyramid floor

_DERIV_STENCIL = np.array([[1.0, -8.0, 0.0, 8.0, -1.0]]) / 12.0


@dataclass
class FlowField:
    """Per-pixel displacement from frame t to frame t+1, in pixels."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must share dimensions")
        if self.valid is None:
            self.valid = np.ones(self.u.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("flow must be finite")

    @property
    def shape(self):
        return self.u.shape

    def magnitude(self):
        return np.hypot(self.u, self.v)


def zero_flow(shape):
    return FlowField(np.zeros(shape), np.zeros(shape), np.ones(shape, bool))


def _image_derivatives(a, bw):
    avg = 0.5 * (a + bw)
    gx = ndimage.correlate(avg, _DERIV_STENCIL, mode="nearest")
    gy = ndimage.correlate(avg, _DERIV_STENCIL.T, mode="nearest")
    return gx, gy, bw - a


def _edge_diffusivity(u, v):
    uy, ux = np.gradient(u)
    vy, vx = np.gradient(v)
    grad2 = ux**2 + uy**2 + vx**2 + vy**2
    return 1.0 / (2.0 * np.sqrt(grad2 + CHARBONNIER_EPS**2))


def _sor_level(a, b, u, v, smoothness, warp_iters, sweeps):
    h, w = a.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    red = (xs.astype(int) + ys.astype(int)) % 2 == 0
    masks = [red, ~red]

    for _ in range(warp_iters):
        bw, inside = bilinear_sample(b, xs + u, ys + v)
        bw = np.where(inside, bw, a)  # no data force off the frame
        ix, iy, it = _image_derivatives(a, bw)
        du = np.zeros_like(u)
        dv = np.zeros_like(v)

        for _fp in range(2):  # lagged-nonlinearity updates
            r = it + ix * du + iy * dv
            wd = 1.0 / (2.0 * np.sqrt(r**2 + CHARBONNIER_EPS**2))
            g = _edge_diffusivity(u + du, v + dv)
            gp = np.pad(g, 1, mode="constant")
            # edge weights to the 4 neighbors (zero across the border)
            gl = 0.5 * (g + gp[1:-1, :-2])
            gr = 0.5 * (g + gp[1:-1, 2:])
            gu = 0.5 * (g + gp[:-2, 1:-1])
            gd = 0.5 * (g + gp[2:, 1:-1])
            gl[:, 0] = gr[:, -1] = gu[0, :] = gd[-1, :] = 0.0
            gsum = gl + gr + gu + gd

            auu = wd * ix * ix + smoothness * gsum + 1e-12
            avv = wd * iy * iy + smoothness * gsum + 1e-12
            for _s in range(max(1, sweeps // 2)):
                for mask in masks:
                    tu = u + du
                    tv = v + dv
                    tup = np.pad(tu, 1, mode="edge")
                    tvp = np.pad(tv, 1, mode="edge")
                    nb_u = (gl * tup[1:-1, :-2] + gr * tup[1:-1, 2:]
                            + gu * tup[:-2, 1:-1] + gd * tup[2:, 1:-1])
                    nb_v = (gl * tvp[1:-1, :-2] + gr * tvp[1:-1, 2:]
                            + gu * tvp[:-2, 1:-1] + gd * tvp[2:, 1:-1])
                    rhs_u = (-wd * ix * (it + iy * dv)
                             + smoothness * (nb_u - gsum * u))
                    rhs_v = (-wd * iy * (it + ix * du)
                             + smoothness * (nb_v - gsum * v))
                    new_du = rhs_u / auu
                    new_dv = rhs_v / avv
                    du[mask] += SOR_OMEGA * (new_du - du)[mask]
                    dv[mask] += SOR_OMEGA * (new_dv - dv)[mask]

        # the linearization only holds for small increments; clamping also
        # stops normal-flow blowup where the image gradient vanishes
        u = u + np.clip(du, -1.0, 1.0)
        v = v + np.clip(dv, -1.0, 1.0)
        u = ndimage.median_filter(u, size=3, mode="nearest")
        v = ndimage.median_filter(v, size=3, mode="nearest")
    return u, v


def estimate_flow(a, b, smoothness=SMOOTHNESS, levels=LEVELS, factor=FACTOR,
                  warp_iters=WARP_ITERS, solver_sweeps=SOLVER_SWEEPS):
    """Dense flow from frame a to frame b by coarse-to-fine robust
    minimization (Charbonnier data and smoothness penalties)."""
    a = check_gray(a, "frame a")
    b = check_gray(b, "frame b")
    check_same_shape(a, b, "frame a", "frame b")
    h, w = a.shape
    if h < 16 or w < 16:
        raise ValueError(f"frames must be at least 16x16, got {w}x{h}")

    # keep the coarsest level usable
    while levels > 1 and round(min(h, w) * factor ** (levels - 1)) < COARSEST_SIZE:
        levels -= 1
    pyr_a = build_pyramid(a, levels, factor)
    pyr_b = build_pyramid(b, levels, factor)

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for level in range(levels - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        lh, lw = la.shape
        if u.shape != la.shape:
            scale_x = lw / u.shape[1]
            scale_y = lh / u.shape[0]
            u = resize(u, (lw, lh)) * scale_x
            v = resize(v, (lw, lh)) * scale_y
        u, v = _sor_level(la, lb, u, v, smoothness, warp_iters, solver_sweeps)

    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    valid = ((xs + u >= 0) & (xs + u <= w - 1)
             & (ys + v >= 0) & (ys + v <= h - 1))
    return FlowField(u, v, valid)


def flow_difference(fields, flows, t):
    """Change of a scalar field across flow-corresponded pixels:
    out(i) = field[t+1](i + flow_t(i)) - field[t](i).

    Returns (difference, valid); linear in the field sequence.
    """
    if t < 0 or t + 1 >= len(fields) or t >= len(flows):
        raise IndexError(f"frame index {t} out of range")
    cur = np.asarray(fields[t], dtype=np.float64)
    nxt = np.asarray(fields[t + 1], dtype=np.float64)
    flow = flows[t]
    check_same_shape(cur, nxt, "field t", "field t+1")
    if flow.shape != cur.shape:
        raise ValueError("flow and field dimensions differ")
    h, w = cur.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    sampled, inside = bilinear_sample(nxt, xs + flow.u, ys + flow.v)
    valid = inside & flow.valid
    diff = np.where(valid, sampled - cur, 0.0)
    return diff, valid


def flow_confidence(a, b, flow, midpoint=0.05, slope=0.01):
    """Per-pixel temporal weight in (0, 1): a decreasing soft threshold of
    the luminance reprojection error, zero where the flow is invalid."""
    a = check_gray(a, "frame a")
    b = check_gray(b, "frame b")
    diff, valid = flow_difference([a, b], [flow], 0)
    conf = soft_threshold(np.abs(diff), midpoint, slope)
    return np.where(valid, conf, 0.0)
