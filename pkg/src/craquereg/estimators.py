"""Scikit-learn style estimator wrappers around the registration pipelines.

``fit`` estimates the transform from an image pair; ``transform`` maps
source-image points into the target frame, so a fitted registrar composes
with the wider fit/transform ecosystem (get_params/set_params included).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .imgcore import Image
from .pipeline import OneStageConfig, RegistrationResult, register_one_stage
from .refine import CoarseToFineConfig, register_coarse_to_fine
from .warp import fit_backward_transform, warp_image_chunked


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (N, 2) points, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("points must be finite")
    return pts


def _check_image(img) -> Image:
    if isinstance(img, Image):
        return img
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim not in (2, 3):
        raise ValueError("images must be 2D or HxWx3 arrays")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("image intensities must lie in [0, 1]")
    return Image(arr)


class _RegistrarBase(TransformerMixin, BaseEstimator):
    """Shared fit/transform plumbing for both registration modes."""

    def fit(self, source_image, target_image=None):
        """Estimate the source -> target transform from an image pair.

        ``source_image`` may also be a (source, target) tuple, in which case
        ``target_image`` must be omitted.
        """
        if target_image is None:
            source_image, target_image = source_image
        src = _check_image(source_image)
        dst = _check_image(target_image)
        self.result_ = self._register(src, dst)
        self.n_correspondences_ = len(self.result_.correspondences)
        return self

    def _register(self, src: Image, dst: Image) -> RegistrationResult:
        raise NotImplementedError

    def transform(self, X):
        """Map (N, 2) source-image points into the target frame."""
        check_is_fitted(self, "result_")
        return self.result_.transform(_check_points(X))

    def warp(self, source_image, out_size=None, chunk_budget_px=64_000_000,
             method="bicubic") -> Image:
        """Backward-warp the source image into the target frame."""
        check_is_fitted(self, "result_")
        src = _check_image(source_image)
        if out_size is None:
            out_size = (src.width, src.height)
        backward = fit_backward_transform(self.result_.correspondences,
                                          lam=self._tps_lambda())
        return warp_image_chunked(src, backward, out_size,
                                  chunk_budget_px=chunk_budget_px,
                                  method=method)

    def _tps_lambda(self) -> float:
        return self.tps_lambda


class OneStageRegistrar(_RegistrarBase):
    """One-stage patch-based non-rigid registration (homography + TPS).

    Parameters mirror the pipeline configuration; see
    :class:`craquereg.pipeline.OneStageConfig` for semantics.
    """

    def __init__(self, patch_size=1024, patch_stride=768,
                 max_keypoints_per_patch=2560, detect_threshold=0.2,
                 max_ratio=0.95, invert_a=False, invert_b=False,
                 describe_on="crack", dedupe_radius_px=4.0, tps_lambda=0.0,
                 threads=1, seed=0):
        self.patch_size = patch_size
        self.patch_stride = patch_stride
        self.max_keypoints_per_patch = max_keypoints_per_patch
        self.detect_threshold = detect_threshold
        self.max_ratio = max_ratio
        self.invert_a = invert_a
        self.invert_b = invert_b
        self.describe_on = describe_on
        self.dedupe_radius_px = dedupe_radius_px
        self.tps_lambda = tps_lambda
        self.threads = threads
        self.seed = seed

    def _config(self) -> OneStageConfig:
        return OneStageConfig(
            patch_size=self.patch_size, patch_stride=self.patch_stride,
            max_keypoints_per_patch=self.max_keypoints_per_patch,
            detect_threshold=self.detect_threshold, max_ratio=self.max_ratio,
            invert_a=self.invert_a, invert_b=self.invert_b,
            describe_on=self.describe_on,
            dedupe_radius_px=self.dedupe_radius_px,
            tps_lambda=self.tps_lambda, threads=self.threads)

    def _register(self, src, dst):
        return register_one_stage(src, dst, self._config(), seed=self.seed)


class CoarseToFineRegistrar(OneStageRegistrar):
    """Coarse-to-fine registration for mixed-resolution pairs.

    The source image must be the higher-resolution modality; refinement runs
    level-by-level up to its native scale.
    """

    def __init__(self, patch_size=1024, patch_stride=768,
                 max_keypoints_per_patch=2560, detect_threshold=0.2,
                 max_ratio=0.95, invert_a=False, invert_b=False,
                 describe_on="crack", dedupe_radius_px=4.0, tps_lambda=0.0,
                 threads=1, seed=0, use_argmax_search=None, use_ncc=None,
                 th_out=None, min_pairs_region=20):
        super().__init__(patch_size=patch_size, patch_stride=patch_stride,
                         max_keypoints_per_patch=max_keypoints_per_patch,
                         detect_threshold=detect_threshold,
                         max_ratio=max_ratio, invert_a=invert_a,
                         invert_b=invert_b, describe_on=describe_on,
                         dedupe_radius_px=dedupe_radius_px,
                         tps_lambda=tps_lambda, threads=threads, seed=seed)
        self.use_argmax_search = use_argmax_search
        self.use_ncc = use_ncc
        self.th_out = th_out
        self.min_pairs_region = min_pairs_region

    def _register(self, src, dst):
        cfg = CoarseToFineConfig(one_stage=self._config(),
                                 use_argmax_search=self.use_argmax_search,
                                 use_ncc=self.use_ncc, th_out=self.th_out,
                                 min_pairs_region=self.min_pairs_region)
        return register_coarse_to_fine(src, dst, cfg, seed=self.seed)
