"""Scikit-learn style front door: fit a depth-transfer model on RGBD
examples, predict per-pixel depth for new images or videos."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import database as dbmod
from .align import AlignParams
from .optimizer import ObjectiveParams, infer_image, infer_video
from .validation import check_image_rgb


class DepthTransfer(BaseEstimator):
    """Non-parametric depth estimator.

    fit(X, y) ingests a database of images X with per-pixel depths y;
    predict(X) infers a depth map for each query image by candidate
    retrieval, dense alignment and robust optimization. All objective
    weights are exposed as constructor parameters, so the estimator
    composes with sklearn tooling (get_params / set_params / clone).
    """

    def __init__(self, k=7, alpha=10.0, beta=0.5, gamma=10.0, nu=100.0,
                 eta=5.0, epsilon=1e-4, max_outer=25, resolution=None,
                 align_params=None):
        self.k = k
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.nu = nu
        self.eta = eta
        self.epsilon = epsilon
        self.max_outer = max_outer
        self.resolution = resolution
        self.align_params = align_params

    def _objective_params(self):
        return ObjectiveParams(
            alpha=self.alpha, beta=self.beta, gamma=self.gamma, nu=self.nu,
            eta=self.eta, epsilon=self.epsilon, k=self.k,
            max_outer=self.max_outer)

    def _align_params(self):
        return self.align_params or AlignParams()

    def fit(self, X, y, source_ids=None, video_sources=()):
        """Build the retrieval database from images X and depth maps y."""
        self.database_ = dbmod.build_from_arrays(
            list(X), list(y), source_ids=source_ids,
            resolution=self.resolution, video_sources=video_sources)
        return self

    def _check_fitted(self):
        if not hasattr(self, "database_"):
            raise NotFittedError(
                "this DepthTransfer instance is not fitted yet")

    def predict(self, X):
        """Depth values for one image (H, W, 3) or a list of images.

        Returns an (H, W) array for a single image, else a list of arrays.
        """
        self._check_fitted()
        single = isinstance(X, np.ndarray) and X.ndim == 3
        images = [X] if single else list(X)
        out = []
        for img in images:
            img = check_image_rgb(img)
            depth = infer_image(img, self.database_,
                                self._objective_params(),
                                self._align_params())
            out.append(depth.values)
        return out[0] if single else out

    def predict_video(self, frames, with_motion=True, with_temporal=True):
        """Depth values for a frame sequence, solved jointly."""
        self._check_fitted()
        depths = infer_video(list(frames), self.database_,
                             self._objective_params(), self._align_params(),
                             with_motion=with_motion,
                             with_temporal=with_temporal)
        return [d.values for d in depths]
