"""Non-parametric depth estimation for single images and videos, with
stereoscopic view synthesis from the inferred depth."""

__version__ = "0.1.0"

from .align import AlignParams, WarpField, align, warp_confidence, warp_scalar
from .database import Database, DatabaseEntry, build_from_arrays, ingest, load_database
from .estimator import DepthTransfer
from .evaluation import MetricReport, depth_metrics, psnr, rescale_to_range, run_benchmark
from .flow import FlowField, estimate_flow, flow_confidence, flow_difference
from .imageops import DepthMap, build_pyramid, gradients, histogram_match, to_grayscale, warp_bilinear
from .optimizer import (
    CandidateSet,
    ObjectiveParams,
    assemble_single,
    assemble_video,
    infer_image,
    infer_video,
    irls_solve,
    robust_norm,
    smoothness_weights,
)
from .viewsynth import (
    StereoParams,
    compose_anaglyph,
    depth_to_disparity,
    render_view,
    temporal_filter_disparity,
)

__all__ = [
    "AlignParams", "WarpField", "align", "warp_confidence", "warp_scalar",
    "Database", "DatabaseEntry", "build_from_arrays", "ingest", "load_database",
    "DepthTransfer",
    "MetricReport", "depth_metrics", "psnr", "rescale_to_range", "run_benchmark",
    "FlowField", "estimate_flow", "flow_confidence", "flow_difference",
    "DepthMap", "build_pyramid", "gradients", "histogram_match",
    "to_grayscale", "warp_bilinear",
    "CandidateSet", "ObjectiveParams", "assemble_single", "assemble_video",
    "infer_image", "infer_video", "irls_solve", "robust_norm",
    "smoothness_weights",
    "StereoParams", "compose_anaglyph", "depth_to_disparity", "render_view",
    "temporal_filter_disparity",
]
