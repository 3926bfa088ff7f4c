"""One-stage non-rigid registration: patches -> matches -> gates -> dedupe
-> VFC -> global weighted-DLT homography -> residual TPS."""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import detect as det
from .detect import DetectionSet, Keypoint
from .geometry import (
    GeometryError,
    Homography,
    TpsModel,
    apply_homography,
    eval_tps,
    fit_homography_dlt,
    fit_tps,
)
from .imgcore import Image
from .matching import (
    Correspondence,
    MatchCriteria,
    candidate_pairs,
    correspondences_to_arrays,
    dedupe_points,
    evaluate_patch_pair,
    make_patch_grid,
    mnn_match,
)
from .robust import VfcParams, vfc_filter

log = logging.getLogger(__name__)


class RegistrationError(Exception):
    """Registration failed; carries per-stage counts for diagnostics."""

    def __init__(self, message: str, stats: dict | None = None):
        super().__init__(message)
        self.stats = stats or {}


@dataclass(frozen=True)
class OneStageConfig:
    """Tunables for the one-stage pipeline (defaults follow the MNN path)."""

    patch_size: int = 1024
    patch_stride: int = 768
    search_radius_patches: int = 1
    max_keypoints_per_patch: int = 2560
    nms_radius: float = 4.0
    detect_threshold: float = 0.2
    max_ratio: float = 0.95
    invert_a: bool = False
    invert_b: bool = False
    describe_on: str = "crack"  # "crack" or "intensity"
    criteria: MatchCriteria = field(default_factory=MatchCriteria)
    dedupe_radius_px: float = 4.0
    # narrower, lightly regularized kernels so the consensus field can
    # track non-rigid deformation instead of flagging its tails
    vfc: VfcParams = field(
        default_factory=lambda: VfcParams(kernel_beta=1.0, lam=1.0))
    vfc_max_removal: float = 0.6
    tps_lambda: float = 0.0
    threads: int = 1


@dataclass
class RegistrationResult:
    global_h: Homography
    tps: TpsModel
    correspondences: list[Correspondence]
    rejected: list[Correspondence]
    stats: dict

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Composite source -> target mapping (homography then residual TPS)."""
        return eval_tps(self.tps, apply_homography(self.global_h, points))


@dataclass
class ImageFeatures:
    """Detections for one image plus the maps they came from."""

    keypoints: list[Keypoint]
    descriptors: np.ndarray
    score_map: np.ndarray
    positions: np.ndarray  # (N, 2) convenience copy


def _pair_seed(seed: int, ia: int, ib: int) -> int:
    ss = np.random.SeedSequence([seed, ia, ib])
    return int(ss.generate_state(1)[0])


def _effective_grid(image: Image, config: OneStageConfig):
    """Patch grid with the configured size clamped to the image extent."""
    size = min(config.patch_size, max(image.width, image.height))
    size = max(size, 32)
    stride = max(1, min(config.patch_stride, size))
    return make_patch_grid(image.width, image.height, size, stride)


def extract_features(image: Image, config: OneStageConfig, invert: bool,
                     external: DetectionSet | None = None) -> ImageFeatures:
    """Detect keypoints/descriptors per patch (or take external detections).

    The score map and crack response are computed once per image; patches
    only gate the per-patch keypoint cap.
    """
    if external is not None:
        pos = np.array([[k.x, k.y] for k in external.keypoints]) \
            if external.keypoints else np.zeros((0, 2))
        return ImageFeatures(keypoints=external.keypoints,
                             descriptors=np.asarray(external.descriptors),
                             score_map=np.zeros((image.height, image.width),
                                                dtype=np.float32),
                             positions=pos)
    score = det.crack_score_map(image, invert=invert)
    grid = _effective_grid(image, config)
    kps: list[Keypoint] = []
    seen: set[tuple[float, float]] = set()
    for ox, oy in grid.origins:
        tile = score[oy:oy + grid.patch_size, ox:ox + grid.patch_size]
        local = det.detect_keypoints(tile, nms_radius=config.nms_radius,
                                     threshold=config.detect_threshold,
                                     max_count=config.max_keypoints_per_patch)
        for kp in local:
            g = (kp.x + ox, kp.y + oy)
            if g in seen:
                continue
            seen.add(g)
            kps.append(Keypoint(x=g[0], y=g[1], score=kp.score))
    kps.sort(key=lambda k: (k.y, k.x))
    if config.describe_on == "crack":
        desc_src = det.black_hat_response(
            (1.0 - image.gray()) if invert else image.gray())
        top = desc_src.max()
        if top > 1e-12:
            desc_src = desc_src / top
    elif config.describe_on == "intensity":
        desc_src = (1.0 - image.gray()) if invert else image.gray()
    else:
        raise ValueError(f"unknown describe_on {config.describe_on!r}")
    descs = det.compute_descriptors(desc_src, kps)
    return ImageFeatures(keypoints=kps, descriptors=descs, score_map=score,
                         positions=det.keypoints_to_array(kps))


def _match_patch_pair(feats_a: ImageFeatures, feats_b: ImageFeatures,
                      grid_a, grid_b, ia: int, ib: int,
                      config: OneStageConfig, seed: int):
    ox_a, oy_a = grid_a.origins[ia]
    ox_b, oy_b = grid_b.origins[ib]
    s = grid_a.patch_size
    pa = feats_a.positions
    pb = feats_b.positions
    sel_a = np.nonzero((pa[:, 0] >= ox_a) & (pa[:, 0] < ox_a + s)
                       & (pa[:, 1] >= oy_a) & (pa[:, 1] < oy_a + s))[0] \
        if len(pa) else np.zeros(0, dtype=int)
    sb = grid_b.patch_size
    sel_b = np.nonzero((pb[:, 0] >= ox_b) & (pb[:, 0] < ox_b + sb)
                       & (pb[:, 1] >= oy_b) & (pb[:, 1] < oy_b + sb))[0] \
        if len(pb) else np.zeros(0, dtype=int)
    if len(sel_a) == 0 or len(sel_b) == 0:
        return [], "no keypoints"
    matches = mnn_match(feats_a.descriptors[sel_a], feats_b.descriptors[sel_b],
                        max_ratio=config.max_ratio)
    cors = [Correspondence(src=feats_a.keypoints[sel_a[i]],
                           dst=feats_b.keypoints[sel_b[j]],
                           confidence=conf)
            for i, j, conf in matches]
    res = evaluate_patch_pair(cors, config.criteria, seed=seed)
    return res.accepted, res.rejection


def collect_correspondences(image_a: Image, image_b: Image,
                            config: OneStageConfig, seed: int,
                            external_a: DetectionSet | None = None,
                            external_b: DetectionSet | None = None,
                            stats: dict | None = None) -> list[Correspondence]:
    """Run detection + patch-pair matching and merge results deterministically."""
    stats = stats if stats is not None else {}
    feats_a = extract_features(image_a, config, config.invert_a, external_a)
    feats_b = extract_features(image_b, config, config.invert_b, external_b)
    stats["keypoints_a"] = len(feats_a.keypoints)
    stats["keypoints_b"] = len(feats_b.keypoints)

    grid_a = _effective_grid(image_a, config)
    grid_b = _effective_grid(image_b, config)
    pairs = candidate_pairs(grid_a, grid_b, config.search_radius_patches)
    stats["patch_pairs"] = len(pairs)

    def work(pair):
        ia, ib = pair
        return _match_patch_pair(feats_a, feats_b, grid_a, grid_b, ia, ib,
                                 config, _pair_seed(seed, ia, ib))

    if config.threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(work, pairs))
    else:
        results = [work(p) for p in pairs]

    collected: list[Correspondence] = []
    rejections: dict[str, int] = {}
    # pairs are already ordered by (ia, ib); merge is deterministic
    for (ia, ib), (accepted, rejection) in zip(pairs, results):
        if rejection:
            rejections[rejection] = rejections.get(rejection, 0) + 1
        collected.extend(accepted)
    stats["accepted_pairs"] = sum(1 for _, (a, r) in zip(pairs, results) if not r)
    stats["rejections"] = rejections
    stats["collected"] = len(collected)
    return collected


def register_one_stage(image_a: Image, image_b: Image,
                       config: OneStageConfig | None = None,
                       seed: int = 0,
                       external_a: DetectionSet | None = None,
                       external_b: DetectionSet | None = None,
                       external_matches: list[Correspondence] | None = None,
                       ) -> RegistrationResult:
    """Full one-stage pipeline; deterministic for a fixed seed."""
    config = config or OneStageConfig()
    stats: dict = {}
    if external_matches is not None:
        collected = list(external_matches)
        stats["collected"] = len(collected)
    else:
        collected = collect_correspondences(image_a, image_b, config, seed,
                                            external_a, external_b, stats)
    if not collected:
        raise RegistrationError("no correspondences", stats)

    deduped = dedupe_points(collected, config.dedupe_radius_px)
    stats["after_dedupe"] = len(deduped)

    src, dst, conf = correspondences_to_arrays(deduped)
    vfc = vfc_filter(src, dst, config.vfc)
    kept_mask = vfc.inlier_mask
    if not vfc.skipped and kept_mask.sum() < (1.0 - config.vfc_max_removal) * len(deduped):
        log.warning("VFC removed more than %.0f%% of points; falling back to "
                    "pre-VFC set", config.vfc_max_removal * 100)
        kept_mask = np.ones(len(deduped), dtype=bool)
        stats["vfc_fallback"] = True
    kept = [c for c, k in zip(deduped, kept_mask) if k]
    rejected = [c for c, k in zip(deduped, kept_mask) if not k]
    stats["after_vfc"] = len(kept)
    stats["vfc_skipped"] = vfc.skipped

    if len(kept) < 4:
        raise RegistrationError("fewer than 4 surviving correspondences", stats)

    src, dst, conf = correspondences_to_arrays(kept)
    try:
        global_h = fit_homography_dlt(src, dst, conf)
    except GeometryError as exc:
        raise RegistrationError(f"global homography failed: {exc}", stats) from exc

    anchors = apply_homography(global_h, src)
    try:
        tps = fit_tps(anchors, dst, lam=config.tps_lambda)
    except GeometryError as exc:
        raise RegistrationError(f"TPS fit failed: {exc}", stats) from exc

    return RegistrationResult(global_h=global_h, tps=tps,
                              correspondences=kept, rejected=rejected,
                              stats=stats)


def displacement_vectors(global_h: Homography,
                         correspondences: list[Correspondence]
                         ) -> list[tuple[np.ndarray, np.ndarray]]:
    """(anchor, delta) pairs: anchor = H(src), delta = dst - H(src)."""
    src, dst, _ = correspondences_to_arrays(correspondences)
    anchors = apply_homography(global_h, src)
    deltas = dst - anchors
    return [(anchors[i], deltas[i]) for i in range(len(anchors))]


# ---------------------------------------------------------------------------
# result archive ("CRQR"): fixed little-endian layout so equal results are
# byte-identical regardless of how they were produced

_MAGIC = b"CRQR"
_VERSION = 1


def _stats_bytes(stats: dict) -> bytes:
    return json.dumps(stats, sort_keys=True, separators=(",", ":")).encode()


def _write_cors(f, cors: list[Correspondence]) -> None:
    f.write(struct.pack("<Q", len(cors)))
    for c in cors:
        f.write(struct.pack("<5d", c.src.x, c.src.y, c.dst.x, c.dst.y,
                            c.confidence))


def _read_cors(f) -> list[Correspondence]:
    (n,) = struct.unpack("<Q", f.read(8))
    out = []
    for _ in range(n):
        xa, ya, xb, yb, conf = struct.unpack("<5d", f.read(40))
        out.append(Correspondence(src=Keypoint(x=xa, y=ya, score=conf),
                                  dst=Keypoint(x=xb, y=yb, score=conf),
                                  confidence=conf))
    return out


def save_result(path: str, result: RegistrationResult) -> None:
    tps = result.tps
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", _VERSION))
        f.write(np.ascontiguousarray(result.global_h.h, dtype="<f8").tobytes())
        f.write(struct.pack("<Qd", len(tps.control_points), tps.regularization))
        f.write(np.ascontiguousarray(tps.control_points, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(tps.affine, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(tps.kernel_weights, dtype="<f8").tobytes())
        _write_cors(f, result.correspondences)
        _write_cors(f, result.rejected)
        sb = _stats_bytes(result.stats)
        f.write(struct.pack("<Q", len(sb)))
        f.write(sb)


def load_result(path: str) -> RegistrationResult:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a registration result archive")
        (version,) = struct.unpack("<H", f.read(2))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported archive version {version}")
        h = np.frombuffer(f.read(72), dtype="<f8").reshape(3, 3)
        n, lam = struct.unpack("<Qd", f.read(16))
        control = np.frombuffer(f.read(16 * n), dtype="<f8").reshape(n, 2)
        affine = np.frombuffer(f.read(48), dtype="<f8").reshape(2, 3)
        weights = np.frombuffer(f.read(16 * n), dtype="<f8").reshape(n, 2)
        kept = _read_cors(f)
        rejected = _read_cors(f)
        (slen,) = struct.unpack("<Q", f.read(8))
        stats = json.loads(f.read(slen).decode())
    tps = TpsModel(control_points=control.copy(), affine=affine.copy(),
                   kernel_weights=weights.copy(), regularization=lam)
    return RegistrationResult(global_h=Homography(h.copy()), tps=tps,
                              correspondences=kept, rejected=rejected,
                              stats=stats)
