"""Depth error metrics (rel, log10, RMS), image PSNR, range rescaling and
the train/test benchmark harness."""

import csv
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .imageops import DepthMap, resample_depth
from .validation import check_image_rgb, check_same_shape

MAKE3D_RANGE = (1.0, 81.0)  # meters


def depth_metrics(d, gt):
    """(rel, log10, rms) between an estimate and ground truth, over pixels
    where the ground truth is valid."""
    if d.values.shape != gt.values.shape:
        raise ValueError("depth maps must share dimensions")
    mask = gt.valid & d.valid
    if not mask.any():
        raise ValueError("no valid overlap between estimate and ground truth")
    est = d.values[mask]
    ref = gt.values[mask]
    rel = float(np.mean(np.abs(est - ref) / ref))
    log10 = float(np.mean(np.abs(np.log10(est) - np.log10(ref))))
    rms = float(np.sqrt(np.mean((est - ref) ** 2)))
    return rel, log10, rms


def rescale_to_range(d, lo, hi):
    """Affine rescale of a depth map sending [min, max] to [lo, hi];
    constant maps become the midpoint."""
    if not hi > lo > 0:
        raise ValueError("need hi > lo > 0")
    vals = d.values[d.valid]
    vmin, vmax = float(vals.min()), float(vals.max())
    if vmax - vmin < 1e-12:
        out = np.full(d.values.shape, 0.5 * (lo + hi))
    else:
        out = lo + (d.values - vmin) * (hi - lo) / (vmax - vmin)
        out = np.clip(out, min(lo, out[d.valid].min()), None)
    out = np.maximum(out, 1e-9)
    return DepthMap(out, d.valid.copy())


def psnr(a, b, mask=None):
    """Peak signal-to-noise ratio in dB on [0, 1] channels; identical
    inputs report inf."""
    a = check_image_rgb(a)
    b = check_image_rgb(b)
    check_same_shape(a, b, "first image", "second image")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("empty PSNR mask")
        diff = (a - b)[mask]
    else:
        diff = a - b
    mse = float(np.mean(diff**2))
    if mse <= 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


@dataclass
class MetricReport:
    """Aggregate metrics plus the per-item breakdown they average."""

    rel: float
    log10: float
    rms: float
    psnr: Optional[float] = None
    items: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["item", "rel", "log10", "rms", "psnr", "status"])
            for it in self.items:
                writer.writerow([
                    it["item"], f"{it['rel']:.6f}", f"{it['log10']:.6f}",
                    f"{it['rms']:.6f}",
                    "" if it.get("psnr") is None else f"{it['psnr']:.4f}",
                    "ok"])
            for name, msg in self.failures:
                writer.writerow([name, "", "", "", "", f"error: {msg}"])

    def summary(self, config=None):
        return {
            "rel": self.rel, "log10": self.log10, "rms": self.rms,
            "psnr": self.psnr, "items": len(self.items),
            "failures": len(self.failures),
            "config": config or {},
        }

    def write_summary(self, path, config=None):
        Path(path).write_text(json.dumps(self.summary(config), indent=2))


def _eval_one(args):
    (name, image, gt, db, params, align_params, protocol) = args
    from .optimizer import infer_image  # deferred: avoid import cycle

    est = infer_image(image, db, params, align_params)
    est = resample_depth(est, (gt.values.shape[1], gt.values.shape[0]))
    if protocol == "rgbd":
        est = rescale_to_range(est, *MAKE3D_RANGE)
        gt = rescale_to_range(gt, *MAKE3D_RANGE)
    rel, log10, rms = depth_metrics(est, gt)
    return {"item": name, "rel": rel, "log10": log10, "rms": rms}


def _child_init():
    try:
        import numba

        numba.set_num_threads(1)
    except Exception:
        pass


def run_benchmark(db, items, params=None, align_params=None,
                  protocol="make3d", workers=1, csv_path=None,
                  summary_path=None, pooled=False, progress=None):
    """Infer depth for every (name, image, ground-truth) test item, compare
    against the ground truth at its native resolution, and average metrics
    per item. Failures are recorded and excluded from the aggregate.

    protocol "make3d" compares meters directly; "rgbd" rescales both sides
    to the 1-81 m range first. `pooled` switches the aggregate from the
    per-image mean to a pixel-pooled computation.
    """
    from .optimizer import ObjectiveParams

    if len(items) == 0:
        raise ValueError("empty test set")
    if protocol not in ("make3d", "rgbd"):
        raise ValueError(f"unknown protocol: {protocol}")
    params = params or ObjectiveParams()

    jobs = [(name, image, gt, db, params, align_params, protocol)
            for (name, image, gt) in items]
    results, failures = [], []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers,
                                 initializer=_child_init) as pool:
            futures = [pool.submit(_eval_one, job) for job in jobs]
            for job, fut in zip(jobs, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    failures.append((job[0], f"{type(exc).__name__}: {exc}"))
                if progress:
                    progress(f"{len(results) + len(failures)}/{len(jobs)}")
    else:
        for job in jobs:
            try:
                results.append(_eval_one(job))
            except Exception as exc:
                traceback.print_exc()
                failures.append((job[0], f"{type(exc).__name__}: {exc}"))
            if progress:
                progress(f"{len(results) + len(failures)}/{len(jobs)}")

    if not results:
        raise RuntimeError("every benchmark item failed")

    if pooled:
        # recompute over concatenated pixels instead of per-image means
        rel = log10 = sq = n = 0.0
        by_name = {job[0]: job for job in jobs}
        for r in results:
            _, image, gt, *_ = by_name[r["item"]]
            npx = int(gt.valid.sum())
            rel += r["rel"] * npx
            log10 += r["log10"] * npx
            sq += (r["rms"] ** 2) * npx
            n += npx
        report = MetricReport(rel / n, log10 / n, float(np.sqrt(sq / n)),
                              items=results, failures=failures)
    else:
        report = MetricReport(
            float(np.mean([r["rel"] for r in results])),
            float(np.mean([r["log10"] for r in results])),
            float(np.mean([r["rms"] for r in results])),
            items=results, failures=failures)
    if csv_path:
        report.write_csv(csv_path)
    if summary_path:
        report.write_summary(summary_path, {
            "protocol": protocol, "pooled": pooled, "workers": workers,
            "k": params.k, "alpha": params.alpha, "beta": params.beta,
            "gamma": params.gamma, "nu": params.nu, "eta": params.eta,
        })
    return report


def load_test_items(root):
    """Test items from the same directory layout the database uses."""
    from .database import _discover_sources, _frame_paths
    from .fileio import read_depth, read_image

    root = Path(root)
    items = []
    for source, _kind in _discover_sources(root):
        for idx, img_path, dep_path in _frame_paths(root, source):
            if not dep_path.is_file():
                continue
            items.append((f"{source}/{idx:05d}", read_image(img_path),
                          read_depth(dep_path)))
    if not items:
        raise ValueError(f"no test items under {root}")
    return items
