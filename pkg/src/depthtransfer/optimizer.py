"""Robust depth objective and its minimizer.

The unknown is the depth at every pixel (of one frame, or of all frames of a
clip jointly). The objective is a sum of robust residual blocks: per-candidate
data rows (absolute depth and depth-gradient agreement with each warped
candidate), edge-aware spatial smoothness rows, a database-prior row per
pixel, and - for video - flow-coupled temporal rows and floor-contact rows on
moving pixels. Every row is wrapped in the smooth L1 surrogate
phi(x) = sqrt(x^2 + eps), so the whole objective is convex and is minimized
by iteratively reweighted least squares with a matrix-free Jacobi-
preconditioned conjugate-gradient inner solve.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import motionseg
from .align import AlignParams, align, warp_confidence, warp_depth
from .features import Features, compute_dense_sift, compute_gist
from .flow import estimate_flow, flow_confidence
from .imageops import (
    DepthMap,
    gradients,
    resample_depth,
    resize,
    soft_threshold,
    to_grayscale,
)
from .validation import check_image_rgb


@dataclass
class ObjectiveParams:
    """Scalar knobs of the depth objective and its solver."""

    alpha: float = 10.0  # spatial smoothness
    beta: float = 0.5  # database prior
    gamma: float = 10.0  # candidate depth-gradient agreement
    nu: float = 100.0  # temporal coherence
    eta: float = 5.0  # floor-contact pull on moving pixels
    epsilon: float = 1e-4  # robust norm softening
    sigmoid_midpoint: float = 0.05
    sigmoid_slope: float = 0.01
    k: int = 7  # candidates per frame
    max_outer: int = 25
    inner_tol: float = 1e-6
    inner_max_iter: int = 600
    outer_tol: float = 1e-5
    depth_floor: float = 0.01  # meters
    window: int = 30  # frames per joint solve
    window_overlap: int = 5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.nu, self.eta) < 0:
            raise ValueError("objective weights must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class CandidateSet:
    """Warped candidate depths and confidences for one query frame."""

    depths: np.ndarray  # (K, H, W) warped depth values
    weights: np.ndarray  # (K, H, W) transfer confidence, 0 where invalid
    valid: np.ndarray  # (K, H, W) warp validity

    def __post_init__(self):
        if self.weights is None:
            raise ValueError("candidate confidences are required")
        if self.depths.shape != self.weights.shape:
            raise ValueError("candidate depths/weights shape mismatch")
        if self.valid is None:
            self.valid = self.weights > 0
        if self.valid.shape != self.depths.shape:
            raise ValueError("candidate validity shape mismatch")

    @property
    def k(self):
        return self.depths.shape[0]


def robust_norm(x, epsilon=1e-4):
    """Smooth L1 surrogate phi(x) = sqrt(x^2 + eps)."""
    return np.sqrt(np.square(np.asarray(x, dtype=np.float64)) + epsilon)


def irls_weight(x, epsilon=1e-4):
    """Half-quadratic weight 1 / (2 phi(x)) for the surrogate above."""
    return 1.0 / (2.0 * robust_norm(x, epsilon))


def smoothness_weights(img, midpoint=0.05, slope=0.01):
    """Edge-aware weights (s_x, s_y): soft thresholds of the luminance
    gradient magnitude in each direction."""
    gray = to_grayscale(check_image_rgb(img))
    gx, gy = gradients(gray)
    return (soft_threshold(np.abs(gx), midpoint, slope),
            soft_threshold(np.abs(gy), midpoint, slope))


# ---------------------------------------------------------------------------
# residual blocks


class _PointBlock:
    """Rows x[frame, i] - target_i."""

    def __init__(self, frame, target, weight, tag):
        self.frame = frame
        self.target = target.ravel().astype(np.float64)
        self.weight = weight.ravel().astype(np.float64)
        self.tag = tag
        self.rows = self.target.size

    def apply(self, x):
        return x[self.frame]

    def apply_t(self, r, out):
        out[self.frame] += r

    def add_diag(self, w, out):
        out[self.frame] += w


class _GradBlock:
    """Rows: forward difference of a frame along one axis minus target.

    Boundary rows (last column or row) are identically zero; their weights
    are forced to zero so they contribute nothing.
    """

    def __init__(self, frame, axis, shape, target, weight, tag):
        self.frame = frame
        self.axis = axis  # 0: along x (columns), 1: along y (rows)
        self.shape = shape
        w = weight.copy()
        if axis == 0:
            w[:, -1] = 0.0
        else:
            w[-1, :] = 0.0
        self.target = target.ravel().astype(np.float64)
        self.weight = w.ravel().astype(np.float64)
        self.tag = tag
        self.rows = self.target.size

    def apply(self, x):
        z = x[self.frame].reshape(self.shape)
        g = np.zeros_like(z)
        if self.axis == 0:
            g[:, :-1] = z[:, 1:] - z[:, :-1]
        else:
            g[:-1, :] = z[1:, :] - z[:-1, :]
        return g.ravel()

    def apply_t(self, r, out):
        rr = r.reshape(self.shape)
        a = np.zeros(self.shape)
        if self.axis == 0:
            a[:, :-1] -= rr[:, :-1]
            a[:, 1:] += rr[:, :-1]
        else:
            a[:-1, :] -= rr[:-1, :]
            a[1:, :] += rr[:-1, :]
        out[self.frame] += a.ravel()

    def add_diag(self, w, out):
        ww = w.reshape(self.shape)
        d = np.zeros(self.shape)
        if self.axis == 0:
            d[:, :-1] += ww[:, :-1]
            d[:, 1:] += ww[:, :-1]
        else:
            d[:-1, :] += ww[:-1, :]
            d[1:, :] += ww[:-1, :]
        out[self.frame] += d.ravel()


class _FlowBlock:
    """Rows: bilinear sample of frame t+1 at flow-corresponded positions
    minus the value at frame t."""

    def __init__(self, frame, corners, coefs, weight, tag, n):
        self.frame = frame  # couples frame and frame + 1
        self.corners = corners  # (4, N) indices into frame t+1
        self.coefs = coefs  # (4, N)
        self.weight = weight.ravel().astype(np.float64)
        self.target = np.zeros(self.weight.size)
        self.tag = tag
        self.rows = self.weight.size
        self.n = n

    def apply(self, x):
        nxt = x[self.frame + 1]
        sampled = (self.coefs * nxt[self.corners]).sum(axis=0)
        return sampled - x[self.frame]

    def apply_t(self, r, out):
        out[self.frame] -= r
        out[self.frame + 1] += np.bincount(
            self.corners.ravel(), weights=(self.coefs * r).ravel(),
            minlength=self.n)

    def add_diag(self, w, out):
        out[self.frame] += w
        out[self.frame + 1] += np.bincount(
            self.corners.ravel(), weights=(self.coefs**2 * w).ravel(),
            minlength=self.n)


@dataclass
class AssembledProblem:
    """Depth unknowns for T frames of H x W pixels plus robust residual
    blocks over them."""

    frames: int
    shape: tuple
    blocks: list = field(default_factory=list)
    epsilon: float = 1e-4

    @property
    def n_pixels(self):
        return self.shape[0] * self.shape[1]

    def row_count(self, tag=None):
        return sum(b.rows for b in self.blocks
                   if tag is None or b.tag == tag)

    def objective(self, x):
        total = 0.0
        for b in self.blocks:
            r = b.apply(x) - b.target
            total += float(np.dot(b.weight, robust_norm(r, self.epsilon)))
        return total


def _grad_targets(depth_values, valid):
    """Gradient targets of a warped candidate with pairwise validity."""
    gx, gy = gradients(depth_values)
    vx = valid.copy()
    vx[:, :-1] &= valid[:, 1:]
    vx[:, -1] = False
    vy = valid.copy()
    vy[:-1, :] &= valid[1:, :]
    vy[-1, :] = False
    return (np.where(vx, gx, 0.0), vx), (np.where(vy, gy, 0.0), vy)


def _single_frame_blocks(frame, img, candidates, prior, p):
    h, w = img.shape[:2]
    shape = (h, w)
    blocks = []
    for j in range(candidates.k):
        cw = candidates.weights[j]
        cd = candidates.depths[j]
        cv = candidates.valid[j]
        blocks.append(_PointBlock(frame, cd, cw, "data"))
        (tx, vx), (ty, vy) = _grad_targets(cd, cv)
        blocks.append(_GradBlock(frame, 0, shape, tx,
                                 p.gamma * cw * vx, "data_grad"))
        blocks.append(_GradBlock(frame, 1, shape, ty,
                                 p.gamma * cw * vy, "data_grad"))
    sx, sy = smoothness_weights(img, p.sigmoid_midpoint, p.sigmoid_slope)
    blocks.append(_GradBlock(frame, 0, shape, np.zeros(shape),
                             p.alpha * sx, "smooth"))
    blocks.append(_GradBlock(frame, 1, shape, np.zeros(shape),
                             p.alpha * sy, "smooth"))
    blocks.append(_PointBlock(frame, prior.values,
                              np.full(shape, p.beta), "prior"))
    return blocks


def assemble_single(img, candidates, prior, p=None):
    """Single-image problem: per-candidate data rows (absolute and gradient),
    smoothness rows and prior rows."""
    p = p or ObjectiveParams()
    img = check_image_rgb(img)
    h, w = img.shape[:2]
    if candidates.depths.shape[1:] != (h, w):
        raise ValueError("candidate rasters must match the image size")
    if prior.values.shape != (h, w):
        raise ValueError("prior must match the image size")
    problem = AssembledProblem(1, (h, w), epsilon=p.epsilon)
    problem.blocks = _single_frame_blocks(0, img, candidates, prior, p)
    return problem


def _flow_corners(flow):
    """Bilinear gather indices/coefficients for sampling frame t+1 at
    i + flow(i)."""
    h, w = flow.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    tx = np.clip(xs + flow.u, 0, w - 1)
    ty = np.clip(ys + flow.v, 0, h - 1)
    x0 = np.floor(tx).astype(np.int64)
    y0 = np.floor(ty).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = tx - x0
    fy = ty - y0
    corners = np.stack([(y0 * w + x0).ravel(), (y0 * w + x1).ravel(),
                        (y1 * w + x0).ravel(), (y1 * w + x1).ravel()])
    coefs = np.stack([((1 - fx) * (1 - fy)).ravel(), (fx * (1 - fy)).ravel(),
                      ((1 - fx) * fy).ravel(), (fx * fy).ravel()])
    return corners, coefs


def assemble_video(frames, candidate_sets, prior, flows=None, temporal_weights=None,
                   masks=None, contact_depths=None, p=None):
    """Joint problem over a frame sequence: per-frame single-image blocks
    plus temporal-coherence rows between consecutive frames and
    floor-contact rows on moving pixels (where a contact depth is known)."""
    p = p or ObjectiveParams()
    t_frames = len(frames)
    if len(candidate_sets) != t_frames:
        raise ValueError("one candidate set per frame required")
    if t_frames > 1:
        if flows is None or len(flows) != t_frames - 1:
            raise ValueError("need T-1 flow fields for T frames")
        if temporal_weights is None or len(temporal_weights) != t_frames - 1:
            raise ValueError("need T-1 temporal weight maps for T frames")
    if masks is not None and len(masks) != t_frames:
        raise ValueError("need one motion mask per frame")
    if contact_depths is not None and len(contact_depths) != t_frames:
        raise ValueError("need one contact-depth map per frame")

    img0 = check_image_rgb(frames[0])
    h, w = img0.shape[:2]
    problem = AssembledProblem(t_frames, (h, w), epsilon=p.epsilon)
    for t in range(t_frames):
        problem.blocks.extend(
            _single_frame_blocks(t, frames[t], candidate_sets[t], prior, p))
    for t in range(t_frames - 1):
        if p.nu == 0:
            break
        corners, coefs = _flow_corners(flows[t])
        wt = p.nu * np.asarray(temporal_weights[t]) * flows[t].valid
        problem.blocks.append(
            _FlowBlock(t, corners, coefs, wt, "temporal", h * w))
    if masks is not None and contact_depths is not None and p.eta > 0:
        for t in range(t_frames):
            if masks[t] is None or contact_depths[t] is None:
                continue
            m = np.asarray(masks[t], dtype=bool)
            contact, defined = contact_depths[t]
            weight = p.eta * (m & defined).astype(np.float64)
            if weight.any():
                problem.blocks.append(
                    _PointBlock(t, np.where(defined, contact, 1.0),
                                weight, "motion"))
    return problem


# ---------------------------------------------------------------------------
# solver


def _pcg(matvec, b, x0, diag, tol, max_iter):
    minv = np.where(diag > 1e-12, 1.0 / np.maximum(diag, 1e-12), 1.0)
    x = x0.copy()
    r = b - matvec(x)
    z = minv * r
    pdir = z.copy()
    rz = float(np.vdot(r, z))
    bnorm = float(np.linalg.norm(b)) + 1e-300
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol * bnorm:
            break
        ap = matvec(pdir)
        denom = float(np.vdot(pdir, ap))
        if denom <= 0:
            break
        step = rz / denom
        x += step * pdir
        r -= step * ap
        z = minv * r
        rz_new = float(np.vdot(r, z))
        pdir = z + (rz_new / rz) * pdir
        rz = rz_new
    return x


def irls_solve(problem, init, p=None):
    """Minimize the assembled objective. Returns (depth array of shape
    (T, H, W), objective trace). The trace is non-increasing: each outer
    step solves the half-quadratic majorizer warm-started at the current
    iterate, which cannot increase the objective."""
    p = p or ObjectiveParams()
    t_frames, (h, w) = problem.frames, problem.shape
    n = h * w
    x = np.asarray(init, dtype=np.float64).reshape(t_frames, n).copy()
    if not np.isfinite(x).all():
        raise ValueError("initialization must be finite")

    trace = [problem.objective(x)]
    for _outer in range(p.max_outer):
        weights = []
        for blk in problem.blocks:
            r = blk.apply(x) - blk.target
            if not np.isfinite(r).all():
                raise FloatingPointError(
                    f"non-finite residual in block '{blk.tag}'")
            weights.append(blk.weight * irls_weight(r, p.epsilon))

        diag = np.zeros((t_frames, n))
        rhs = np.zeros((t_frames, n))
        for blk, wgt in zip(problem.blocks, weights):
            blk.add_diag(wgt, diag)
            blk.apply_t(wgt * blk.target, rhs)

        def matvec(z, _w=weights):
            out = np.zeros((t_frames, n))
            for blk, wgt in zip(problem.blocks, _w):
                blk.apply_t(wgt * blk.apply(z), out)
            return out

        x_new = _pcg(matvec, rhs, x, diag, p.inner_tol, p.inner_max_iter)
        obj = problem.objective(x_new)
        if obj > trace[-1] * (1 + 1e-9):
            break  # inner roundoff; keep the previous, better iterate
        x = x_new
        rel_drop = (trace[-1] - obj) / max(abs(trace[-1]), 1e-300)
        trace.append(obj)
        if rel_drop < p.outer_tol:
            break

    x = np.maximum(x, p.depth_floor)
    return x.reshape(t_frames, h, w), trace


def weighted_median_init(candidates, prior):
    """Per-pixel confidence-weighted median of the warped candidates;
    pixels without any confident candidate fall back to the prior."""
    k, h, w = candidates.depths.shape
    vals = candidates.depths.reshape(k, -1)
    wts = candidates.weights.reshape(k, -1)
    order = np.argsort(vals, axis=0)
    svals = np.take_along_axis(vals, order, axis=0)
    swts = np.take_along_axis(wts, order, axis=0)
    csum = np.cumsum(swts, axis=0)
    total = csum[-1]
    has = total > 1e-12
    idx = np.argmax(csum >= 0.5 * total[None, :], axis=0)
    med = np.take_along_axis(svals, idx[None, :], axis=0)[0]
    out = np.where(has, med, prior.values.ravel())
    return out.reshape(h, w)


# ---------------------------------------------------------------------------
# end-to-end inference


def _canonical_image(img, resolution):
    w, h = resolution
    return np.clip(resize(check_image_rgb(img), (w, h)), 0.0, 1.0)


def build_candidate_set(query_desc, entries, db, align_params, warp_sink=None):
    """Align each retrieved entry and pull its depth into the query frame."""
    depths, weights, valids = [], [], []
    for j, entry in enumerate(entries):
        cdesc = db.descriptor_grid(entry)
        warp = align(query_desc, cdesc, align_params)
        dvals, dvalid = warp_depth(entry.depth, warp)
        conf = warp_confidence(query_desc, cdesc, warp)
        conf = np.where(dvalid, conf, 0.0)
        depths.append(dvals)
        weights.append(conf)
        valids.append(dvalid)
        if warp_sink:
            warp_sink(j, warp)
    return CandidateSet(np.stack(depths), np.stack(weights), np.stack(valids))


def infer_image(img, db, p=None, align_params=None, trace_sink=None,
                warp_sink=None):
    """Single-image depth inference: retrieve candidates, align and warp
    them, then solve the robust objective. Returns a DepthMap at the
    input's native resolution."""
    p = p or ObjectiveParams()
    align_params = align_params or AlignParams()
    img = check_image_rgb(img)
    native_h, native_w = img.shape[:2]

    canon = _canonical_image(img, db.resolution)
    feats = Features(compute_gist(canon))
    entries = db.query_candidates(feats, p.k)
    qdesc = compute_dense_sift(canon)
    candidates = build_candidate_set(qdesc, entries, db, align_params,
                                     warp_sink)

    problem = assemble_single(canon, candidates, db.prior, p)
    init = weighted_median_init(candidates, db.prior)
    solved, trace = irls_solve(problem, init[None], p)
    if trace_sink:
        trace_sink(trace)
    canon_depth = DepthMap(np.maximum(solved[0], p.depth_floor), None)
    return resample_depth(canon_depth, (native_w, native_h))


def _blend_windows(pieces, t_frames, window, overlap):
    """Linear cross-fade of overlapping window solves."""
    h, w = pieces[0][1].shape[1:]
    acc = np.zeros((t_frames, h, w))
    wsum = np.zeros(t_frames)
    for start, sol in pieces:
        length = sol.shape[0]
        weight = np.ones(length)
        if start > 0:
            ramp = min(overlap, length)
            weight[:ramp] = np.linspace(1.0 / (ramp + 1), 1.0, ramp)
        if start + length < t_frames:
            ramp = min(overlap, length)
            weight[-ramp:] = np.linspace(1.0, 1.0 / (ramp + 1), ramp)
        acc[start:start + length] += sol * weight[:, None, None]
        wsum[start:start + length] += weight
    return acc / wsum[:, None, None]


def infer_video(frames, db, p=None, align_params=None, with_motion=True,
                with_temporal=True, progress=None, mask_sink=None,
                flow_sink=None):
    """Video depth inference: per-frame candidate transfer plus temporal
    coherence and (two-pass) floor-contact handling of moving objects.
    Returns a list of DepthMap at native resolution."""
    p = p or ObjectiveParams()
    align_params = align_params or AlignParams()
    if len(frames) == 0:
        raise ValueError("need at least one frame")
    native_h, native_w = check_image_rgb(frames[0]).shape[:2]

    canon = [_canonical_image(f, db.resolution) for f in frames]
    t_frames = len(canon)
    if not with_temporal:
        p = replace(p, nu=0.0)

    grays = [to_grayscale(f) for f in canon]
    flows = []
    temporal = []
    if t_frames > 1:
        for t in range(t_frames - 1):
            fl = estimate_flow(grays[t], grays[t + 1])
            flows.append(fl)
            temporal.append(flow_confidence(grays[t], grays[t + 1], fl,
                                            p.sigmoid_midpoint, p.sigmoid_slope))
            if progress:
                progress(f"flow {t + 1}/{t_frames - 1}")

    candidate_sets = []
    for t, frame in enumerate(canon):
        feats = Features(compute_gist(frame))
        entries = db.query_candidates(feats, p.k)
        qdesc = compute_dense_sift(frame)
        candidate_sets.append(
            build_candidate_set(qdesc, entries, db, align_params))
        if progress:
            progress(f"candidates {t + 1}/{t_frames}")

    if flow_sink and flows:
        flow_sink(flows)

    masks = None
    if with_motion and t_frames >= 3:
        masks = motionseg.segment_frames(canon)
        if mask_sink:
            mask_sink(masks)
        if not any(m.any() for m in masks):
            masks = None

    def solve(contact):
        if t_frames <= p.window or p.nu == 0:
            spans = [(0, t_frames)]
        else:
            stride = max(1, p.window - p.window_overlap)
            spans = []
            start = 0
            while True:
                end = min(start + p.window, t_frames)
                spans.append((start, end))
                if end == t_frames:
                    break
                start += stride
        pieces = []
        for start, end in spans:
            sub_masks = None if masks is None else masks[start:end]
            sub_contact = None if contact is None else contact[start:end]
            prob = assemble_video(
                canon[start:end], candidate_sets[start:end], db.prior,
                flows[start:end - 1], temporal[start:end - 1],
                sub_masks, sub_contact, p)
            init = np.stack([
                weighted_median_init(candidate_sets[t], db.prior)
                for t in range(start, end)])
            sol, _ = irls_solve(prob, init, p)
            pieces.append((start, sol))
            if progress:
                progress(f"solve frames {start}-{end - 1}")
        if len(pieces) == 1:
            return pieces[0][1]
        return _blend_windows(pieces, t_frames, p.window, p.window_overlap)

    first_pass = solve(None)
    result = first_pass
    if masks is not None:
        contact = []
        for t in range(t_frames):
            depth_t = DepthMap(np.maximum(first_pass[t], p.depth_floor), None)
            contact.append(motionseg.floor_contact(masks[t], depth_t))
        if any(c is not None and c[1].any() for c in contact):
            result = solve(contact)

    out = []
    for t in range(t_frames):
        canon_depth = DepthMap(np.maximum(result[t], p.depth_floor), None)
        out.append(resample_depth(canon_depth, (native_w, native_h)))
    return out
