"""Registration of very large multi-modal images by their crack structure.

The package detects craquelure keypoints, matches them patch-wise under
local-homography gates, filters the matches with a vector-field consensus
step, fits a global homography plus thin-plate-spline, optionally refines
correspondences coarse-to-fine across resolution levels, and warps the
source image in memory-bounded chunks.
"""

from .config import PRESETS, RunConfig, load_config, load_preset
from .detect import (
    DetectionSet,
    DetectionTile,
    ExchangeFormatError,
    Keypoint,
    build_feature_volume,
    compute_descriptors,
    crack_score_map,
    detect_keypoints,
    read_detections,
    write_detections,
)
from .estimators import CoarseToFineRegistrar, OneStageRegistrar
from .geometry import (
    Homography,
    TpsModel,
    apply_homography,
    eval_tps,
    fit_homography_dlt,
    fit_tps,
)
from .imgcore import Image, load_image, rescale, save_image
from .matching import Correspondence, read_matches_text, write_matches_text
from .metrics import ControlPointSet, EvalReport, evaluate, render_overlay
from .pipeline import (
    OneStageConfig,
    RegistrationError,
    RegistrationResult,
    load_result,
    register_one_stage,
    save_result,
)
from .refine import (
    CoarseToFineConfig,
    plan_levels,
    register_coarse_to_fine,
    register_coarse_to_fine_from_result,
)
from .robust import VfcParams, robust_homography, vfc_filter
from .warp import fit_backward_transform, warp_image_chunked

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "RunConfig",
    "load_config",
    "load_preset",
    "DetectionSet",
    "DetectionTile",
    "ExchangeFormatError",
    "Keypoint",
    "build_feature_volume",
    "compute_descriptors",
    "crack_score_map",
    "detect_keypoints",
    "read_detections",
    "write_detections",
    "CoarseToFineRegistrar",
    "OneStageRegistrar",
    "Homography",
    "TpsModel",
    "apply_homography",
    "eval_tps",
    "fit_homography_dlt",
    "fit_tps",
    "Image",
    "load_image",
    "rescale",
    "save_image",
    "Correspondence",
    "read_matches_text",
    "write_matches_text",
    "ControlPointSet",
    "EvalReport",
    "evaluate",
    "render_overlay",
    "OneStageConfig",
    "RegistrationError",
    "RegistrationResult",
    "load_result",
    "register_one_stage",
    "save_result",
    "CoarseToFineConfig",
    "plan_levels",
    "register_coarse_to_fine",
    "register_coarse_to_fine_from_result",
    "VfcParams",
    "robust_homography",
    "vfc_filter",
    "fit_backward_transform",
    "warp_image_chunked",
    "__version__",
]
