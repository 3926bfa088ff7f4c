"""Coarse-to-fine keypoint refinement, region-wise outlier removal and the
multi-level registration orchestrator.

Within a level, "modality 1" is the image with the higher native
resolution: its keypoints are refined first against their own score map;
the second modality's keypoints are then shifted to match via feature-volume
correlation (NCC search plus a sub-pixel correlation step).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import detect as det
from .detect import FeatureVolume, Keypoint
from .geometry import (
    GeometryError,
    check_homography_validity,
    fit_homography_dlt,
    fit_tps,
    apply_homography,
    reprojection_errors,
    softargmax,
)
from .imgcore import Image, rescale, sample_grid
from .matching import Correspondence, correspondences_to_arrays
from .pipeline import (
    OneStageConfig,
    RegistrationError,
    RegistrationResult,
    register_one_stage,
)
from .robust import RobustError, robust_homography

log = logging.getLogger(__name__)

SEARCH_WINDOW = 18          # first-level search region (pixels per side)
SEARCH_TOP_K = 4
SOFTARGMAX_WINDOW = 7
NCC_SEARCH = 24
BASE_REGION_SIZE = 768
MAX_SCALE_RATIO = 8.0
LARGE_RATIO_THRESHOLD = 2.5


@dataclass(frozen=True)
class Level:
    scale_a: float       # relative to image A's native resolution
    scale_b: float
    region_size: int


@dataclass(frozen=True)
class LevelPlan:
    """Refinement schedule; ``levels`` excludes the coarse base, finest last."""

    ratio: float
    coarse_scale_a: float
    coarse_scale_b: float
    levels: tuple[Level, ...]

    @property
    def factors(self) -> list[float]:
        scales = [self.coarse_scale_a] + [lv.scale_a for lv in self.levels]
        return [scales[i + 1] / scales[i] for i in range(len(self.levels))]


def plan_levels(native_res_a: tuple[int, int], native_res_b: tuple[int, int],
                coarse_scale: float | None = None) -> LevelPlan:
    """Plan per-level scales so every upscale step is at most x2.

    Image A is assumed to be the higher-resolution modality; the coarse base
    runs at B's native resolution (A downscaled by the ratio), and B is
    bicubically upscaled past its native size at finer levels. Region sizes
    are 768, 1536, 3072, ... per level.
    """
    ra = max(native_res_a)
    rb = max(native_res_b)
    ratio = ra / rb
    if ratio < 1.0:
        raise ValueError("expected image A to be the higher-resolution side")
    if ratio > MAX_SCALE_RATIO:
        raise ValueError(f"scale ratio {ratio:.2f} exceeds supported maximum "
                         f"{MAX_SCALE_RATIO}")
    coarse_a = coarse_scale if coarse_scale is not None else 1.0 / ratio
    if ratio <= 1.0 + 1e-9:
        return LevelPlan(ratio=ratio, coarse_scale_a=coarse_a,
                         coarse_scale_b=1.0, levels=())
    n_levels = int(np.ceil(np.log2(ratio) - 1e-9))
    levels = []
    scale = coarse_a
    for i in range(n_levels):
        remaining = 1.0 / scale
        factor = min(2.0, remaining)
        scale = scale * factor
        if i == n_levels - 1:
            scale = 1.0  # snap to native resolution
        levels.append(Level(scale_a=scale, scale_b=scale * ratio,
                            region_size=BASE_REGION_SIZE * (2 ** i)))
    return LevelPlan(ratio=ratio, coarse_scale_a=coarse_a, coarse_scale_b=1.0,
                     levels=tuple(levels))


def upscale_keypoints(points: np.ndarray, factor: float) -> np.ndarray:
    """Rescale continuous coordinates preserving pixel centers."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    pts = np.asarray(points, dtype=np.float64)
    return (pts + 0.5) * factor - 0.5


@dataclass
class RefineOutcome:
    points: np.ndarray
    flagged: np.ndarray  # True where the input was passed through


def refine_mod1(score_map: np.ndarray, keypoints: np.ndarray,
                mode: str = "first_level",
                temperature: float = 0.1) -> RefineOutcome:
    """Snap modality-1 keypoints onto the crack score map.

    ``first_level``: inside an 18x18 search window take the top-4 score
    locations, pick the one spatially closest to the input point, then apply
    a 7x7 softargmax around it. ``subsequent``: 7x7 softargmax directly
    around the input point. Keypoints whose window falls outside the map are
    passed through and flagged.
    """
    if mode not in ("first_level", "subsequent"):
        raise ValueError(f"unknown mode {mode!r}")
    sm = np.asarray(score_map, dtype=np.float64)
    h, w = sm.shape
    half_s = SEARCH_WINDOW // 2
    half_w = SOFTARGMAX_WINDOW // 2
    pts = np.atleast_2d(np.asarray(keypoints, dtype=np.float64))
    out = pts.copy()
    flagged = np.zeros(len(pts), dtype=bool)
    for i, (x, y) in enumerate(pts):
        cx, cy = int(round(x)), int(round(y))
        if not (0 <= cx < w and 0 <= cy < h):
            flagged[i] = True
            continue
        if mode == "first_level":
            x0 = cx - half_s
            y0 = cy - half_s
            x1, y1 = x0 + SEARCH_WINDOW, y0 + SEARCH_WINDOW
            if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                x0, y0 = max(0, x0), max(0, y0)
                x1, y1 = min(w, x1), min(h, y1)
            win = sm[y0:y1, x0:x1]
            if win.size == 0:
                flagged[i] = True
                continue
            flat = win.ravel()
            k = min(SEARCH_TOP_K, flat.size)
            top = np.argpartition(flat, -k)[-k:]
            tys, txs = np.unravel_index(top, win.shape)
            cand = np.stack([txs + x0, tys + y0], axis=1).astype(np.float64)
            d2 = ((cand - [x, y]) ** 2).sum(axis=1)
            best = cand[np.argmin(d2)]
            px, py = int(best[0]), int(best[1])
        else:
            px, py = cx, cy
        wx0, wy0 = px - half_w, py - half_w
        wx1, wy1 = px + half_w + 1, py + half_w + 1
        if wx0 < 0 or wy0 < 0 or wx1 > w or wy1 > h:
            flagged[i] = True
            continue
        dx, dy = softargmax(sm[wy0:wy1, wx0:wx1], temperature=temperature)
        out[i] = (px + dx, py + dy)
    return RefineOutcome(points=out, flagged=flagged)


def _sample_volume_patch(vol: FeatureVolume, center: tuple[float, float],
                         size: int) -> np.ndarray:
    offs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    gy, gx = np.meshgrid(center[1] + offs, center[0] + offs, indexing="ij")
    return sample_grid(vol.values.astype(np.float64), gx, gy)


def refine_mod2_ncc(feat_a: FeatureVolume, feat_b: FeatureVolume,
                    refined_kp_a: np.ndarray, upscaled_kp_b: np.ndarray,
                    template_radius: int = 3,
                    temperature: float = 0.1) -> RefineOutcome:
    """Shift modality-2 keypoints by NCC template search in feature space.

    The template is a (2r+1)^2 window of A's volume at the refined keypoint
    (sub-pixel); the search is a 24x24 window of B's volume around the
    upscaled keypoint. NCC runs jointly over all channels; the peak gets a
    7x7 softargmax. Flat (zero-variance) templates pass through flagged.
    """
    kpa = np.atleast_2d(np.asarray(refined_kp_a, dtype=np.float64))
    kpb = np.atleast_2d(np.asarray(upscaled_kp_b, dtype=np.float64))
    tsize = 2 * template_radius + 1
    hb, wb = feat_b.height, feat_b.width
    half_w = SOFTARGMAX_WINDOW // 2
    out = kpb.copy()
    flagged = np.zeros(len(kpb), dtype=bool)
    for i in range(len(kpb)):
        templ = _sample_volume_patch(feat_a, tuple(kpa[i]), tsize)
        tmean = templ.mean()
        tnorm = templ - tmean
        tvar = float((tnorm * tnorm).sum())
        if tvar < 1e-12:
            flagged[i] = True
            continue
        cx, cy = int(round(kpb[i, 0])), int(round(kpb[i, 1]))
        x0 = cx - NCC_SEARCH // 2
        y0 = cy - NCC_SEARCH // 2
        if x0 < 0 or y0 < 0 or x0 + NCC_SEARCH > wb or y0 + NCC_SEARCH > hb:
            flagged[i] = True
            continue
        search = feat_b.values[y0:y0 + NCC_SEARCH, x0:x0 + NCC_SEARCH].astype(np.float64)
        npos = NCC_SEARCH - tsize + 1
        scores = np.full((npos, npos), -1.0)
        for sy in range(npos):
            for sx in range(npos):
                win = search[sy:sy + tsize, sx:sx + tsize]
                wmean = win.mean()
                wn = win - wmean
                den = np.sqrt(tvar * (wn * wn).sum())
                if den < 1e-12:
                    continue
                scores[sy, sx] = float((tnorm * wn).sum() / den)
        py, px = np.unravel_index(np.argmax(scores), scores.shape)
        wy0, wx0 = py - half_w, px - half_w
        if wy0 < 0 or wx0 < 0 or wy0 + SOFTARGMAX_WINDOW > npos \
                or wx0 + SOFTARGMAX_WINDOW > npos:
            # peak too close to the search border for the softargmax window
            sub = (0.0, 0.0)
        else:
            sub = softargmax(scores[wy0:wy0 + SOFTARGMAX_WINDOW,
                                    wx0:wx0 + SOFTARGMAX_WINDOW],
                             temperature=temperature)
        # template center at placement (px, py) sits at x0 + px + tsize//2
        peak_x = x0 + px + template_radius + sub[0]
        peak_y = y0 + py + template_radius + sub[1]
        out[i] = (peak_x, peak_y)
    return RefineOutcome(points=out, flagged=flagged)


def refine_mod2_corr_fine(feat_a: FeatureVolume, feat_b: FeatureVolume,
                          kp_a: np.ndarray, kp_b: np.ndarray,
                          temperature: float = 0.1) -> RefineOutcome:
    """Sub-pixel shift of modality-2 keypoints by center-vector correlation.

    A's feature vector at the keypoint is dotted with every cell of a 7x7
    feature patch of B; the softargmax of the resulting matching-probability
    surface is added to the keypoint. Zero center vectors pass through.
    """
    kpa = np.atleast_2d(np.asarray(kp_a, dtype=np.float64))
    kpb = np.atleast_2d(np.asarray(kp_b, dtype=np.float64))
    out = kpb.copy()
    flagged = np.zeros(len(kpb), dtype=bool)
    for i in range(len(kpb)):
        center = _sample_volume_patch(feat_a, tuple(kpa[i]), 1)[0, 0]
        if np.linalg.norm(center) < 1e-12:
            flagged[i] = True
            continue
        patch = _sample_volume_patch(feat_b, tuple(kpb[i]), SOFTARGMAX_WINDOW)
        scores = patch @ center
        dx, dy = softargmax(scores, temperature=temperature)
        out[i] = (kpb[i, 0] + dx, kpb[i, 1] + dy)
    return RefineOutcome(points=out, flagged=flagged)


# ---------------------------------------------------------------------------
# region-wise outlier removal with neighborhood growing

@dataclass(frozen=True)
class RegionGrid:
    """Non-overlapping tiling; each correspondence belongs to one cell."""

    width: int
    height: int
    region_size: int

    @property
    def cols(self) -> int:
        return max(1, int(np.ceil(self.width / self.region_size)))

    @property
    def rows(self) -> int:
        return max(1, int(np.ceil(self.height / self.region_size)))

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        cx = min(int(x // self.region_size), self.cols - 1)
        cy = min(int(y // self.region_size), self.rows - 1)
        return (max(cx, 0), max(cy, 0))


@dataclass
class OutlierRemovalReport:
    kept: list[Correspondence]
    dropped: int
    unchecked_history: list[int]
    global_fallbacks: int = 0


def remove_outliers_regionwise(correspondences: list[Correspondence],
                               grid: RegionGrid, th_out: float,
                               min_pairs: int = 20, seed: int = 0,
                               fit_threshold: float = 3.0,
                               ransac_iters: int = 1000) -> OutlierRemovalReport:
    """Per-region robust homography filtering with neighborhood growing.

    Cells with at least ``min_pairs`` points get their own robust homography
    (reprojection threshold 3); points with error above ``th_out`` are
    dropped. Sparse or invalid cells merge points from growing Manhattan
    rings of neighbor cells until a valid model with enough support exists,
    falling back to one global model as the last resort. Cells whose global
    fallback is also invalid lose all their points (with a warning).
    """
    src, dst, _ = correspondences_to_arrays(correspondences)
    cells: dict[tuple[int, int], list[int]] = {}
    for i, c in enumerate(correspondences):
        cells.setdefault(grid.cell_of(c.src.x, c.src.y), []).append(i)

    max_ring = grid.cols + grid.rows

    def fit_on(indices: list[int]):
        if len(indices) < max(min_pairs, 4):
            return None
        try:
            fit = robust_homography(src[indices], dst[indices],
                                    threshold=fit_threshold,
                                    max_iters=ransac_iters, seed=seed)
        except RobustError:
            return None
        ok, _ = check_homography_validity(fit.homography)
        return fit.homography if ok else None

    keep = np.ones(len(correspondences), dtype=bool)
    order = sorted(cells.keys(), key=lambda c: (c[1], c[0]))  # row-major
    unchecked = list(order)
    history = [len(unchecked)]
    global_fallbacks = 0

    for cell in order:
        own = cells[cell]
        h = fit_on(own)
        ring = 0
        while h is None and ring < max_ring:
            ring += 1
            merged = []
            for other in order:
                if abs(other[0] - cell[0]) + abs(other[1] - cell[1]) <= ring:
                    merged.extend(cells[other])
            h = fit_on(merged)
        if h is None:
            # last resort: one model over everything
            h = fit_on(list(range(len(correspondences))))
            global_fallbacks += 1
        if h is None:
            log.warning("region %s: no valid model even globally; dropping "
                        "%d points", cell, len(own))
            for i in own:
                keep[i] = False
        else:
            err = reprojection_errors(h, src[own], dst[own])
            for i, e in zip(own, err):
                if e > th_out:
                    keep[i] = False
        unchecked.remove(cell)
        history.append(len(unchecked))

    kept = [c for c, k in zip(correspondences, keep) if k]
    return OutlierRemovalReport(kept=kept, dropped=int((~keep).sum()),
                                unchecked_history=history,
                                global_fallbacks=global_fallbacks)


# ---------------------------------------------------------------------------
# coarse-to-fine orchestrator

def default_th_out(ratio: float) -> float:
    if ratio <= 2.0:
        return 2.0
    if ratio <= 3.5:
        return 3.0
    return 4.0


@dataclass(frozen=True)
class CoarseToFineConfig:
    """Multi-level settings layered on top of the one-stage config."""

    one_stage: OneStageConfig = field(default_factory=OneStageConfig)
    use_argmax_search: bool | None = None   # None: decide from total ratio
    use_ncc: bool | None = None
    th_out: float | None = None
    min_pairs_region: int = 20
    softargmax_temperature: float = 0.1
    outlier_fit_threshold: float = 3.0


def _refine_level(image_a_lvl: Image, image_b_lvl: Image,
                  kp_a: np.ndarray, kp_b: np.ndarray,
                  mode1: str, use_ncc: bool, config: CoarseToFineConfig,
                  invert_a: bool, invert_b: bool):
    """One refinement level: mod1 on the sharp side, then mod2 on the other."""
    score_a = det.crack_score_map(image_a_lvl, invert=invert_a)
    r1 = refine_mod1(score_a, kp_a, mode=mode1,
                     temperature=config.softargmax_temperature)
    vol_a = det.build_feature_volume(image_a_lvl, invert=invert_a)
    vol_b = det.build_feature_volume(image_b_lvl, invert=invert_b)
    kp_b_cur = kp_b
    flags_ncc = np.zeros(len(kp_b), dtype=bool)
    if use_ncc:
        r2 = refine_mod2_ncc(vol_a, vol_b, r1.points, kp_b_cur,
                             temperature=config.softargmax_temperature)
        kp_b_cur = r2.points
        flags_ncc = r2.flagged
    r3 = refine_mod2_corr_fine(vol_a, vol_b, r1.points, kp_b_cur,
                               temperature=config.softargmax_temperature)
    return r1.points, r3.points, {
        "mod1_flagged": int(r1.flagged.sum()),
        "ncc_flagged": int(flags_ncc.sum()),
        "corr_fine_flagged": int(r3.flagged.sum()),
    }


def register_coarse_to_fine(image_a: Image, image_b: Image,
                            config: CoarseToFineConfig | None = None,
                            seed: int = 0) -> RegistrationResult:
    """Coarse one-stage registration followed by level-by-level refinement.

    Image A must be the higher-resolution modality. The coarse stage runs at
    B's native scale; each level rescales both images, upscales the
    correspondence keypoints and refines them; region-wise outlier removal
    and the final weighted DLT + TPS run at the finest scale.
    """
    config = config or CoarseToFineConfig()
    plan = plan_levels((image_a.width, image_a.height),
                       (image_b.width, image_b.height))
    coarse_a = rescale(image_a, plan.coarse_scale_a, method="bicubic") \
        if plan.coarse_scale_a != 1.0 else image_a
    result = register_one_stage(coarse_a, image_b, config.one_stage, seed=seed)
    return _refine_from_coarse(image_a, image_b, plan, result, config, seed)


def register_coarse_to_fine_from_result(image_a: Image, image_b: Image,
                                        coarse: "RegistrationResult",
                                        config: CoarseToFineConfig | None = None,
                                        seed: int = 0) -> "RegistrationResult":
    """Resume level-by-level refinement from a saved coarse-stage result."""
    config = config or CoarseToFineConfig()
    plan = plan_levels((image_a.width, image_a.height),
                       (image_b.width, image_b.height))
    return _refine_from_coarse(image_a, image_b, plan, coarse, config, seed)


def _refine_from_coarse(image_a: Image, image_b: Image, plan: LevelPlan,
                        result: "RegistrationResult",
                        config: CoarseToFineConfig,
                        seed: int) -> "RegistrationResult":
    if not plan.levels:
        return result

    use_argmax = config.use_argmax_search
    use_ncc = config.use_ncc
    large = plan.ratio > LARGE_RATIO_THRESHOLD
    if use_argmax is None:
        use_argmax = large
    if use_ncc is None:
        use_ncc = large

    src, dst, conf = correspondences_to_arrays(result.correspondences)
    stats = dict(result.stats)
    stats["levels"] = []
    prev_scale_a = plan.coarse_scale_a
    prev_scale_b = plan.coarse_scale_b
    cfg1 = config.one_stage

    for li, level in enumerate(plan.levels):
        fa = level.scale_a / prev_scale_a
        fb = level.scale_b / prev_scale_b
        img_a_lvl = rescale(image_a, level.scale_a, "bicubic") \
            if abs(level.scale_a - 1.0) > 1e-9 else image_a
        img_b_lvl = rescale(image_b, level.scale_b, "bicubic") \
            if abs(level.scale_b - 1.0) > 1e-9 else image_b
        src = upscale_keypoints(src, fa)
        dst = upscale_keypoints(dst, fb)
        mode1 = "first_level" if (li == 0 and use_argmax) else "subsequent"
        src, dst, level_stats = _refine_level(
            img_a_lvl, img_b_lvl, src, dst, mode1, use_ncc, config,
            cfg1.invert_a, cfg1.invert_b)
        level_stats.update({"scale_a": level.scale_a, "scale_b": level.scale_b,
                            "region_size": level.region_size,
                            "points": len(src)})
        stats["levels"].append(level_stats)
        prev_scale_a, prev_scale_b = level.scale_a, level.scale_b

    cors = [Correspondence(src=Keypoint(x=s[0], y=s[1], score=c.src.score),
                           dst=Keypoint(x=d[0], y=d[1], score=c.dst.score),
                           confidence=c.confidence)
            for s, d, c in zip(src, dst, result.correspondences)]

    finest = plan.levels[-1]
    grid = RegionGrid(width=int(round(image_a.width * finest.scale_a)),
                      height=int(round(image_a.height * finest.scale_a)),
                      region_size=finest.region_size)
    th_out = config.th_out if config.th_out is not None \
        else default_th_out(plan.ratio)
    report = remove_outliers_regionwise(
        cors, grid, th_out=th_out, min_pairs=config.min_pairs_region,
        seed=seed, fit_threshold=config.outlier_fit_threshold,
        ransac_iters=cfg1.criteria.ransac_iters)
    stats["outliers_dropped"] = report.dropped
    stats["region_global_fallbacks"] = report.global_fallbacks
    kept = report.kept
    if len(kept) < 4:
        raise RegistrationError("fewer than 4 correspondences after "
                                "region-wise filtering", stats)

    src_f, dst_f, conf_f = correspondences_to_arrays(kept)
    try:
        global_h = fit_homography_dlt(src_f, dst_f, conf_f)
        anchors = apply_homography(global_h, src_f)
        tps = fit_tps(anchors, dst_f, lam=cfg1.tps_lambda)
    except GeometryError as exc:
        raise RegistrationError(f"final fit failed: {exc}", stats) from exc
    stats["final_points"] = len(kept)
    return RegistrationResult(global_h=global_h, tps=tps,
                              correspondences=kept,
                              rejected=result.rejected, stats=stats)
