"""Dense scene alignment between a query and a candidate descriptor grid.

The warp is found by coarse-to-fine discrete search: at each pyramid level a
truncated-L1 matching cost over a displacement window is aggregated along
scanlines (min-sum passes in four directions), then polished with
checkerboard sweeps that minimize the exact energy locally. The returned
warp never has higher energy than the zero warp; ties collapse to zero.
"""

from dataclasses import dataclass

import numba
import numpy as np

from .imageops import bilinear_sample
from .validation import check_same_shape

DESC_SCALE = 255.0  # costs are stated on descriptors scaled to roughly [0, 51]


@dataclass
class AlignParams:
    """Energy weights and search schedule for dense alignment."""

    data_truncation: float = 30.0
    displacement_weight: float = 0.005 * DESC_SCALE
    smoothness_weight: float = 2.0 * DESC_SCALE
    smoothness_truncation: float = 40.0 * DESC_SCALE
    search_radius: int = 5
    levels: int = 4
    sweeps: int = 30

    def __post_init__(self):
        if min(self.data_truncation, self.displacement_weight,
               self.smoothness_weight, self.smoothness_truncation) < 0:
            raise ValueError("alignment weights must be >= 0")
        if self.search_radius < 1:
            raise ValueError("search radius must be >= 1")


@dataclass
class WarpField:
    """Integer displacement from query pixels into a candidate's domain."""

    u: np.ndarray
    v: np.ndarray
    residual: np.ndarray  # matched-descriptor L2 distance, >= 0
    inside: np.ndarray  # rounded target lands inside the candidate domain

    @property
    def shape(self):
        return self.u.shape


def zero_warp(shape):
    z = np.zeros(shape)
    return WarpField(z.copy(), z.copy(), z.copy(), np.ones(shape, bool))


@numba.njit(cache=True, parallel=True, fastmath=True)
def _cost_volume(qd, cd, base_u, base_v, radius, trunc, disp_w):
    h, w, c = qd.shape
    n = 2 * radius + 1
    nl = n * n
    vol = np.empty((h, w, nl), dtype=np.float32)
    for y in numba.prange(h):
        for x in range(w):
            bu = base_u[y, x]
            bv = base_v[y, x]
            for l in range(nl):
                du = l % n - radius
                dv = l // n - radius
                tu = bu + du
                tv = bv + dv
                xx = x + tu
                yy = y + tv
                pen = disp_w * (abs(tu) + abs(tv))
                if xx < 0 or xx >= w or yy < 0 or yy >= h:
                    vol[y, x, l] = trunc + pen
                    continue
                acc = 0.0
                for k in range(c):
                    acc += abs(qd[y, x, k] - cd[yy, xx, k])
                    if acc >= trunc:
                        acc = trunc
                        break
                vol[y, x, l] = acc + pen
    return vol


@numba.njit(cache=True, fastmath=True)
def _label_message(prev, out, n, mu, cap):
    # min-sum message over the label grid: separable truncated-L1, one
    # distance transform per axis, normalized to min zero.
    nl = n * n
    lo = prev[0]
    for l in range(1, nl):
        if prev[l] < lo:
            lo = prev[l]
    # rows: transform over du
    for r in range(n):
        base = r * n
        m = prev[base]
        out[base] = m
        for i in range(1, n):
            v = prev[base + i]
            c = out[base + i - 1] + mu
            out[base + i] = v if v < c else c
        for i in range(n - 2, -1, -1):
            c = out[base + i + 1] + mu
            if c < out[base + i]:
                out[base + i] = c
    # columns: transform over dv, then apply both truncations
    for i in range(n):
        for r in range(1, n):
            c = out[(r - 1) * n + i] + mu
            if c < out[r * n + i]:
                out[r * n + i] = c
        for r in range(n - 2, -1, -1):
            c = out[(r + 1) * n + i] + mu
            if c < out[r * n + i]:
                out[r * n + i] = c
    hi = lo + 2.0 * cap
    for l in range(nl):
        if out[l] > hi:
            out[l] = hi
        out[l] -= lo


@numba.njit(cache=True, parallel=True, fastmath=True)
def _scanline_aggregate(vol, radius, mu, cap):
    """Sum of min-sum passes along +x, -x, +y, -y scanlines."""
    h, w, nl = vol.shape
    n = 2 * radius + 1
    total = np.zeros((h, w, nl), dtype=np.float32)
    for y in numba.prange(h):
        fwd = np.empty(nl, dtype=np.float32)
        msg = np.empty(nl, dtype=np.float32)
        for step in range(2):
            start = 0 if step == 0 else w - 1
            stop = w if step == 0 else -1
            stride = 1 if step == 0 else -1
            first = True
            for x in range(start, stop, stride):
                if first:
                    for l in range(nl):
                        fwd[l] = vol[y, x, l]
                    first = False
                else:
                    _label_message(fwd, msg, n, mu, cap)
                    for l in range(nl):
                        fwd[l] = vol[y, x, l] + msg[l]
                for l in range(nl):
                    total[y, x, l] += fwd[l]
    for x in numba.prange(w):
        fwd = np.empty(nl, dtype=np.float32)
        msg = np.empty(nl, dtype=np.float32)
        for step in range(2):
            start = 0 if step == 0 else h - 1
            stop = h if step == 0 else -1
            stride = 1 if step == 0 else -1
            first = True
            for y in range(start, stop, stride):
                if first:
                    for l in range(nl):
                        fwd[l] = vol[y, x, l]
                    first = False
                else:
                    _label_message(fwd, msg, n, mu, cap)
                    for l in range(nl):
                        fwd[l] = vol[y, x, l] + msg[l]
                for l in range(nl):
                    total[y, x, l] += fwd[l]
    return total


@numba.njit(cache=True, fastmath=True)
def _pair_cost(du, dv, mu, cap):
    cu = mu * abs(du)
    if cu > cap:
        cu = cap
    cv = mu * abs(dv)
    if cv > cap:
        cv = cap
    return cu + cv


@numba.njit(cache=True, parallel=True, fastmath=True)
def _icm_sweeps(vol, base_u, base_v, u, v, radius, mu, cap, sweeps):
    """Checkerboard coordinate descent on the exact energy; labels stay in
    the per-pixel window the cost volume was built on."""
    h, w, nl = vol.shape
    n = 2 * radius + 1
    for _ in range(sweeps):
        for parity in range(2):
            for y in numba.prange(h):
                for x in range((y + parity) % 2, w, 2):
                    bu = base_u[y, x]
                    bv = base_v[y, x]
                    best = np.inf
                    best_u = u[y, x]
                    best_v = v[y, x]
                    for l in range(nl):
                        tu = bu + l % n - radius
                        tv = bv + l // n - radius
                        e = vol[y, x, l]
                        if x > 0:
                            e += _pair_cost(tu - u[y, x - 1], tv - v[y, x - 1], mu, cap)
                        if x < w - 1:
                            e += _pair_cost(tu - u[y, x + 1], tv - v[y, x + 1], mu, cap)
                        if y > 0:
                            e += _pair_cost(tu - u[y - 1, x], tv - v[y - 1, x], mu, cap)
                        if y < h - 1:
                            e += _pair_cost(tu - u[y + 1, x], tv - v[y + 1, x], mu, cap)
                        if e < best:
                            best = e
                            best_u = tu
                            best_v = tv
                    u[y, x] = best_u
                    v[y, x] = best_v


@numba.njit(cache=True, parallel=True, fastmath=True)
def _warp_energy_terms(qd, cd, u, v, trunc, disp_w):
    h, w, c = qd.shape
    data = 0.0
    for y in numba.prange(h):
        row = 0.0
        for x in range(w):
            xx = x + u[y, x]
            yy = y + v[y, x]
            if xx < 0 or xx >= w or yy < 0 or yy >= h:
                acc = trunc
            else:
                acc = 0.0
                for k in range(c):
                    acc += abs(qd[y, x, k] - cd[yy, xx, k])
                    if acc >= trunc:
                        acc = trunc
                        break
            row += acc + disp_w * (abs(u[y, x]) + abs(v[y, x]))
        data += row
    return data


@numba.njit(cache=True, parallel=True, fastmath=True)
def _residual_l2(qd, cd, u, v):
    h, w, c = qd.shape
    res = np.empty((h, w), dtype=np.float64)
    for y in numba.prange(h):
        for x in range(w):
            xx = x + u[y, x]
            yy = y + v[y, x]
            if xx < 0:
                xx = 0
            if xx >= w:
                xx = w - 1
            if yy < 0:
                yy = 0
            if yy >= h:
                yy = h - 1
            acc = 0.0
            for k in range(c):
                dd = qd[y, x, k] - cd[yy, xx, k]
                acc += dd * dd
            res[y, x] = np.sqrt(acc)
    return res


def warp_energy(query_desc, cand_desc, u, v, params):
    """Exact alignment energy of an integer displacement field."""
    qd = np.ascontiguousarray(query_desc, dtype=np.float32) * DESC_SCALE
    cd = np.ascontiguousarray(cand_desc, dtype=np.float32) * DESC_SCALE
    ui = np.asarray(u).astype(np.int64)
    vi = np.asarray(v).astype(np.int64)
    e = _warp_energy_terms(qd, cd, ui, vi,
                           np.float32(params.data_truncation),
                           np.float32(params.displacement_weight))
    mu = params.smoothness_weight
    cap = params.smoothness_truncation
    du = np.abs(np.diff(ui, axis=1))
    dv = np.abs(np.diff(vi, axis=1))
    e += np.minimum(mu * du, cap).sum() + np.minimum(mu * dv, cap).sum()
    du = np.abs(np.diff(ui, axis=0))
    dv = np.abs(np.diff(vi, axis=0))
    e += np.minimum(mu * du, cap).sum() + np.minimum(mu * dv, cap).sum()
    return float(e)


def _pool2(desc):
    h, w = desc.shape[:2]
    h2, w2 = h // 2, w // 2
    return desc[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))


def align(query_desc, cand_desc, params=None):
    """Estimate the displacement field aligning a candidate descriptor grid
    with the query grid. Both grids must share dimensions."""
    if params is None:
        params = AlignParams()
    qd = np.ascontiguousarray(query_desc, dtype=np.float32)
    cd = np.ascontiguousarray(cand_desc, dtype=np.float32)
    if qd.shape != cd.shape:
        raise ValueError(f"descriptor grids differ: {qd.shape} vs {cd.shape}")
    h, w = qd.shape[:2]

    # descriptor pyramid by 2x mean pooling
    levels_q = [qd * DESC_SCALE]
    levels_c = [cd * DESC_SCALE]
    for _ in range(1, params.levels):
        if min(levels_q[-1].shape[:2]) < 16:
            break
        levels_q.append(np.ascontiguousarray(_pool2(levels_q[-1])))
        levels_c.append(np.ascontiguousarray(_pool2(levels_c[-1])))

    trunc = np.float32(params.data_truncation)
    disp_w = np.float32(params.displacement_weight)
    mu = np.float32(params.smoothness_weight)
    cap = np.float32(params.smoothness_truncation)
    radius = int(params.search_radius)

    u = v = None
    for level in range(len(levels_q) - 1, -1, -1):
        lq, lc = levels_q[level], levels_c[level]
        lh, lw = lq.shape[:2]
        if u is None:
            base_u = np.zeros((lh, lw), dtype=np.int64)
            base_v = np.zeros((lh, lw), dtype=np.int64)
        else:
            ys = np.minimum(np.arange(lh) // 2, u.shape[0] - 1)
            xs = np.minimum(np.arange(lw) // 2, u.shape[1] - 1)
            base_u = (2 * u[np.ix_(ys, xs)]).astype(np.int64)
            base_v = (2 * v[np.ix_(ys, xs)]).astype(np.int64)
        vol = _cost_volume(lq, lc, base_u, base_v, radius, trunc, disp_w)
        agg = _scanline_aggregate(vol, radius, mu, cap)
        labels = np.argmin(agg, axis=2)
        n = 2 * radius + 1
        u = base_u + labels % n - radius
        v = base_v + labels // n - radius
        if params.sweeps > 0:
            _icm_sweeps(vol, base_u, base_v, u, v, radius, mu, cap,
                        int(params.sweeps))
        del vol, agg

    # the zero warp is a hard upper bound on the returned energy
    if warp_energy(query_desc, cand_desc, u, v, params) > warp_energy(
            query_desc, cand_desc, np.zeros_like(u), np.zeros_like(v), params):
        u = np.zeros_like(u)
        v = np.zeros_like(v)

    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    inside = ((xs + u >= 0) & (xs + u <= w - 1)
              & (ys + v >= 0) & (ys + v <= h - 1))
    residual = _residual_l2(np.ascontiguousarray(qd),
                            np.ascontiguousarray(cd),
                            u.astype(np.int64), v.astype(np.int64))
    return WarpField(u.astype(np.float64), v.astype(np.float64),
                     residual, inside)


def warp_scalar(field, warp):
    """Pull a candidate-domain raster into the query domain:
    output(i) = field(i + (u, v)(i)). Returns (values, valid)."""
    field = np.asarray(field, dtype=np.float64)
    check_same_shape(field, warp.u, "field", "warp")
    h, w = field.shape[:2]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    out, inside = bilinear_sample(field, xs + warp.u, ys + warp.v)
    return out, inside


def warp_depth(depth, warp):
    """Warp a depth map, flagging pixels that sample outside the frame or
    touch invalid source depth."""
    values, inside = warp_scalar(depth.filled(), warp)
    vmask, _ = warp_scalar(depth.valid.astype(np.float64), warp)
    valid = inside & (vmask >= 0.999)
    return np.maximum(values, 1e-6), valid


def warp_confidence(query_desc, cand_desc, warp, sigma_floor=1e-3):
    """Per-pixel transfer confidence in [0, 1]: exp(-r^2 / sigma^2) with r
    the matched-descriptor residual and sigma its in-frame median."""
    qd = np.ascontiguousarray(query_desc, dtype=np.float32)
    cd = np.ascontiguousarray(cand_desc, dtype=np.float32)
    r = _residual_l2(qd, cd, warp.u.astype(np.int64), warp.v.astype(np.int64))
    pool = r[warp.inside] if warp.inside.any() else r
    sigma = max(float(np.median(pool)), sigma_floor)
    conf = np.exp(-(r**2) / sigma**2)
    return np.where(warp.inside, conf, 0.0)
