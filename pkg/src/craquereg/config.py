"""Layered run configuration: defaults < preset/config file < flag overrides.

The flat key space keeps configs greppable and round-trippable; unknown keys
are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources

import yaml

from .geometry import HomographyValidityConfig
from .matching import MatchCriteria
from .pipeline import OneStageConfig
from .refine import CoarseToFineConfig
from .robust import VfcParams
from .warp import DEFAULT_CHUNK_BUDGET_PX


@dataclass
class RunConfig:
    """Every tunable with a documented default; see the preset files."""

    # patch pipeline
    patch_size: int = 1024
    patch_stride: int = 768
    search_radius_patches: int = 1
    max_keypoints_per_patch: int = 2560
    nms_radius: float = 4.0
    detect_threshold: float = 0.2
    max_ratio: float = 0.95
    invert_a: bool = False
    invert_b: bool = False
    describe_on: str = "crack"
    # matching criteria
    min_matches: int = 20
    min_inliers: int = 10
    inlier_threshold_px: float = 3.0
    ransac_iters: int = 1000
    max_perspective: float = 1e-3
    diag_ratio_min: float = 0.2
    diag_ratio_max: float = 5.0
    min_det2x2: float = 1e-3
    dedupe_radius_px: float = 4.0
    # VFC
    vfc_kernel_beta: float = 1.0
    vfc_lambda: float = 1.0
    vfc_gamma_init: float = 0.9
    vfc_outlier_variance: float = 10.0
    vfc_max_iter: int = 500
    vfc_tol: float = 1e-8
    vfc_max_removal: float = 0.6
    # TPS / refinement
    tps_lambda: float = 0.0
    use_argmax_search: bool | None = None
    use_ncc: bool | None = None
    th_out: float | None = None
    min_pairs_region: int = 20
    softargmax_temperature: float = 0.1
    outlier_fit_threshold: float = 3.0
    # warping / execution
    chunk_budget_px: int = DEFAULT_CHUNK_BUDGET_PX
    warp_method: str = "bicubic"
    threads: int = 1
    seed: int = 0

    def one_stage(self) -> OneStageConfig:
        validity = HomographyValidityConfig(
            max_perspective=self.max_perspective,
            diag_ratio_range=(self.diag_ratio_min, self.diag_ratio_max),
            min_det2x2=self.min_det2x2)
        criteria = MatchCriteria(min_matches=self.min_matches,
                                 min_inliers=self.min_inliers,
                                 inlier_threshold_px=self.inlier_threshold_px,
                                 validity=validity,
                                 ransac_iters=self.ransac_iters)
        vfc = VfcParams(kernel_beta=self.vfc_kernel_beta, lam=self.vfc_lambda,
                        gamma_init=self.vfc_gamma_init,
                        outlier_variance=self.vfc_outlier_variance,
                        max_iter=self.vfc_max_iter, tol=self.vfc_tol)
        return OneStageConfig(
            patch_size=self.patch_size, patch_stride=self.patch_stride,
            search_radius_patches=self.search_radius_patches,
            max_keypoints_per_patch=self.max_keypoints_per_patch,
            nms_radius=self.nms_radius, detect_threshold=self.detect_threshold,
            max_ratio=self.max_ratio, invert_a=self.invert_a,
            invert_b=self.invert_b, describe_on=self.describe_on,
            criteria=criteria, dedupe_radius_px=self.dedupe_radius_px,
            vfc=vfc, vfc_max_removal=self.vfc_max_removal,
            tps_lambda=self.tps_lambda, threads=self.threads)

    def coarse_to_fine(self) -> CoarseToFineConfig:
        return CoarseToFineConfig(
            one_stage=self.one_stage(),
            use_argmax_search=self.use_argmax_search, use_ncc=self.use_ncc,
            th_out=self.th_out, min_pairs_region=self.min_pairs_region,
            softargmax_temperature=self.softargmax_temperature,
            outlier_fit_threshold=self.outlier_fit_threshold)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: str) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)


PRESETS = ("one-stage-sparse", "one-stage-mnn", "c2f-small-ratio",
           "c2f-large-ratio")


def load_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("craquereg").joinpath(f"presets/{name}.yaml").read_text()
    data = yaml.safe_load(text) or {}
    return RunConfig().with_overrides(data)


def load_config(path: str | None = None, preset: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Layer: defaults < preset < file < overrides."""
    cfg = load_preset(preset) if preset else RunConfig()
    if path:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        cfg = cfg.with_overrides(data)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
