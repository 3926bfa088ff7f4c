import numpy as np
import pytest

from craquereg.detect import Keypoint, build_feature_volume, FeatureVolume
from craquereg.geometry import Homography, apply_homography
from craquereg.imgcore import Image
from craquereg.matching import Correspondence
from craquereg.pipeline import OneStageConfig, register_one_stage
from craquereg.refine import (
    CoarseToFineConfig,
    RegionGrid,
    default_th_out,
    plan_levels,
    refine_mod1,
    refine_mod2_corr_fine,
    refine_mod2_ncc,
    register_coarse_to_fine,
    remove_outliers_regionwise,
    upscale_keypoints,
)

from conftest import make_synthetic_pair


class TestPlanLevels:
    def test_ratio_one_empty_plan(self):
        plan = plan_levels((1000, 800), (1000, 800))
        assert plan.levels == ()

    def test_ratio_two_one_level(self):
        plan = plan_levels((2000, 1600), (1000, 800))
        assert len(plan.levels) == 1
        assert plan.levels[-1].scale_a == 1.0
        assert abs(plan.levels[-1].scale_b - 2.0) < 1e-12

    def test_ratio_four_two_levels(self):
        plan = plan_levels((4000, 3200), (1000, 800))
        assert len(plan.levels) == 2
        assert plan.levels[0].region_size == 768
        assert plan.levels[1].region_size == 1536

    def test_steps_bounded_by_two(self):
        for ratio in (1.5, 2.0, 3.0, 4.0, 6.5):
            plan = plan_levels((int(1000 * ratio), int(800 * ratio)),
                               (1000, 800))
            prev = plan.coarse_scale_a
            for level in plan.levels:
                assert level.scale_a / prev <= 2.05
                prev = level.scale_a
            assert plan.levels[-1].scale_a == 1.0

    def test_ratio_above_eight_rejected(self):
        with pytest.raises(ValueError):
            plan_levels((9000, 9000), (1000, 1000))


class TestUpscaleKeypoints:
    def test_factor_one_unchanged(self):
        pts = np.array([[1.5, 2.5], [10.0, 20.0]])
        assert np.array_equal(upscale_keypoints(pts, 1.0), pts)

    def test_center_convention(self):
        out = upscale_keypoints(np.array([[0.0, 0.0]]), 2.0)
        assert np.allclose(out, [[0.5, 0.5]])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 100, (50, 2))
        back = upscale_keypoints(upscale_keypoints(pts, 2.0), 0.5)
        assert np.max(np.abs(back - pts)) < 1e-12


def bump_map(size, peaks, sigma=1.5):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    acc = np.zeros((size, size))
    for cx, cy, amp in peaks:
        acc += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2)
                            / (2 * sigma ** 2))
    return acc


class TestRefineMod1:
    def test_peak_at_keypoint_unchanged(self):
        sm = bump_map(64, [(30, 30, 1.0)])
        out = refine_mod1(sm, np.array([[30.0, 30.0]]), "first_level")
        assert np.allclose(out.points[0], [30.0, 30.0], atol=0.1)
        assert not out.flagged[0]

    def test_displaced_peak_found(self):
        sm = bump_map(64, [(35, 28, 1.0)])
        out = refine_mod1(sm, np.array([[30.0, 30.0]]), "first_level")
        assert np.hypot(out.points[0, 0] - 35, out.points[0, 1] - 28) < 0.5

    def test_closest_of_two_peaks_wins(self):
        # peaks on opposite sides so the 7x7 softargmax window around the
        # selected peak cannot see the other one
        sm = bump_map(64, [(34, 30, 1.0), (23, 30, 1.0)])
        out = refine_mod1(sm, np.array([[30.0, 30.0]]), "first_level")
        assert abs(out.points[0, 0] - 34) < 1.0

    def test_subsequent_mode_local_only(self):
        # peak 5 px away is outside the 7x7 softargmax window
        sm = bump_map(64, [(36, 30, 1.0)]) + 1e-6
        out = refine_mod1(sm, np.array([[30.0, 30.0]]), "subsequent")
        assert abs(out.points[0, 0] - 30.0) <= 3.0

    def test_outside_window_flagged(self):
        sm = bump_map(32, [(16, 16, 1.0)])
        out = refine_mod1(sm, np.array([[-40.0, -40.0]]), "first_level")
        assert out.flagged[0]
        assert np.allclose(out.points[0], [-40.0, -40.0])

    def test_window_containment(self):
        rng = np.random.default_rng(1)
        sm = rng.random((96, 96))
        pts = rng.uniform(20, 76, (30, 2))
        first = refine_mod1(sm, pts, "first_level")
        assert np.max(np.abs(first.points - pts)) <= 9 + 3 + 1e-9
        sub = refine_mod1(sm, pts, "subsequent")
        assert np.max(np.abs(sub.points - pts)) <= 3 + 1e-9

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            refine_mod1(np.zeros((8, 8)), np.zeros((1, 2)), "nope")


def textured_volume(seed=2, size=96):
    rng = np.random.default_rng(seed)
    from scipy import ndimage

    base = ndimage.gaussian_filter(rng.random((size, size)), 1.5)
    base = (base - base.min()) / (base.max() - base.min())
    return build_feature_volume(Image(base.astype(np.float32)))


class TestRefineMod2Ncc:
    def test_zero_lag_autocorrelation(self):
        vol = textured_volume()
        kp = np.array([[48.0, 48.0]])
        out = refine_mod2_ncc(vol, vol, kp, kp)
        assert np.max(np.abs(out.points - kp)) < 0.1

    def test_integer_translation_recovered(self):
        vol = textured_volume(seed=13)
        shifted = FeatureVolume(values=np.roll(np.roll(vol.values, -3, axis=0),
                                               4, axis=1))
        # feature at (x, y) in vol appears at (x+4, y-3) in shifted
        kp = np.array([[48.0, 48.0]])
        out = refine_mod2_ncc(vol, shifted, kp, kp)
        assert abs(out.points[0, 0] - 52.0) < 0.25
        assert abs(out.points[0, 1] - 45.0) < 0.25

    def test_flat_template_flagged(self):
        flat = FeatureVolume(values=np.zeros((64, 64, 8), dtype=np.float32))
        vol = textured_volume(seed=4, size=64)
        kp = np.array([[32.0, 32.0]])
        out = refine_mod2_ncc(flat, vol, kp, kp)
        assert out.flagged[0]
        assert np.allclose(out.points, kp)

    def test_window_containment(self):
        va = textured_volume(seed=5)
        vb = textured_volume(seed=6)
        rng = np.random.default_rng(7)
        pts = rng.uniform(30, 66, (20, 2))
        out = refine_mod2_ncc(va, vb, pts, pts)
        assert np.max(np.abs(out.points - pts)) <= 12 + 3 + 1e-9


def unit_vector_volume(seed, size=64, channels=16):
    """Per-pixel iid unit feature vectors: sharp correlation peak at zero lag."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(size, size, channels)).astype(np.float32)
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return FeatureVolume(values=v)


def peaked_volume(center_xy, size=64, sigma=1.0):
    """One channel holds a sharp Gaussian spot; the rest a constant floor."""
    cx, cy = center_xy
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    spot = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma ** 2))
    vals = np.stack([spot, np.full_like(spot, 0.05)], axis=-1)
    vals /= np.linalg.norm(vals, axis=-1, keepdims=True)
    return FeatureVolume(values=vals)


class TestRefineMod2CorrFine:
    def test_identity_zero_offset(self):
        vol = unit_vector_volume(seed=8)
        kp = np.array([[40.0, 40.0]])
        out = refine_mod2_corr_fine(vol, vol, kp, kp)
        assert np.max(np.abs(out.points - kp)) < 0.05 + 1e-9

    def test_symmetric_surface_zero_offset(self):
        vol = peaked_volume((40.0, 40.0))
        kp = np.array([[40.0, 40.0]])
        out = refine_mod2_corr_fine(vol, vol, kp, kp)
        assert np.max(np.abs(out.points - kp)) < 1e-6

    def test_subpixel_shift_direction(self):
        # B's spot sits half a pixel to the right of A's, so the refined
        # point moves from the queried location toward +x by about 0.5
        va = peaked_volume((40.0, 40.0))
        vb = peaked_volume((40.5, 40.0))
        kp = np.array([[40.0, 40.0]])
        out = refine_mod2_corr_fine(va, vb, kp, kp)
        assert abs(out.points[0, 0] - 40.5) < 0.2
        assert abs(out.points[0, 1] - 40.0) < 0.2

    def test_zero_center_vector_flagged(self):
        flat = FeatureVolume(values=np.zeros((64, 64, 8), dtype=np.float32))
        vol = textured_volume(seed=10, size=64)
        kp = np.array([[32.0, 32.0]])
        out = refine_mod2_corr_fine(flat, vol, kp, kp)
        assert out.flagged[0]

    def test_window_containment(self):
        va = textured_volume(seed=11)
        vb = textured_volume(seed=12)
        rng = np.random.default_rng(13)
        pts = rng.uniform(20, 76, (20, 2))
        out = refine_mod2_corr_fine(va, vb, pts, pts)
        assert np.max(np.abs(out.points - pts)) <= 3 + 1e-9


def h_correspondences(rng, h, n, extent, conf=0.9, origin=(0.0, 0.0)):
    src = rng.uniform(0, extent, (n, 2)) + np.asarray(origin)
    dst = apply_homography(h, src)
    return [Correspondence(src=Keypoint(x=s[0], y=s[1], score=1.0),
                           dst=Keypoint(x=d[0], y=d[1], score=1.0),
                           confidence=conf)
            for s, d in zip(src, dst)]


def outlier_correspondences(rng, n, extent, origin=(0.0, 0.0)):
    src = rng.uniform(0, extent, (n, 2)) + np.asarray(origin)
    dst = src + rng.uniform(30, 60, (n, 2))
    return [Correspondence(src=Keypoint(x=s[0], y=s[1], score=1.0),
                           dst=Keypoint(x=d[0], y=d[1], score=1.0),
                           confidence=0.9)
            for s, d in zip(src, dst)]


class TestRemoveOutliersRegionwise:
    def test_gross_outliers_dropped(self):
        rng = np.random.default_rng(14)
        m = np.eye(3)
        m[0, 2] = 3.0
        good = h_correspondences(rng, Homography(m), 30, 700.0)
        bad = outlier_correspondences(rng, 3, 700.0)
        grid = RegionGrid(width=768, height=768, region_size=768)
        report = remove_outliers_regionwise(good + bad, grid, th_out=3.0,
                                            seed=0)
        assert len(report.kept) == 30
        kept_src = {(c.src.x, c.src.y) for c in report.kept}
        assert kept_src == {(c.src.x, c.src.y) for c in good}

    def test_all_cells_consistent_identity(self):
        rng = np.random.default_rng(15)
        m = np.eye(3)
        m[1, 2] = -2.0
        cors = []
        for cy in range(2):
            for cx in range(2):
                cors += h_correspondences(rng, Homography(m), 25, 380.0,
                                          origin=(cx * 384.0, cy * 384.0))
        grid = RegionGrid(width=768, height=768, region_size=384)
        report = remove_outliers_regionwise(cors, grid, th_out=3.0, seed=0)
        assert len(report.kept) == len(cors)

    def test_sparse_cell_merged_with_dense_neighbor(self):
        rng = np.random.default_rng(16)
        m = np.eye(3)
        m[0, 2] = 5.0
        h = Homography(m)
        dense = h_correspondences(rng, h, 40, 380.0, origin=(0.0, 0.0))
        sparse = h_correspondences(rng, h, 5, 380.0, origin=(384.0, 0.0))
        grid = RegionGrid(width=768, height=384, region_size=384)
        report = remove_outliers_regionwise(dense + sparse, grid, th_out=3.0,
                                            seed=0)
        # the sparse cell is checked against the merged model and kept
        assert len(report.kept) == 45

    def test_unchecked_history_strictly_decreasing(self):
        rng = np.random.default_rng(17)
        m = np.eye(3)
        h = Homography(m)
        cors = []
        for cy in range(3):
            for cx in range(3):
                n = 25 if (cx + cy) % 2 == 0 else 4
                cors += h_correspondences(rng, h, n, 250.0,
                                          origin=(cx * 256.0, cy * 256.0))
        grid = RegionGrid(width=768, height=768, region_size=256)
        report = remove_outliers_regionwise(cors, grid, th_out=3.0, seed=0)
        hist = report.unchecked_history
        assert all(b < a for a, b in zip(hist, hist[1:]))
        assert hist[-1] == 0


class TestDefaultThOut:
    def test_schedule(self):
        assert default_th_out(1.5) == 2.0
        assert default_th_out(2.0) == 2.0
        assert default_th_out(3.0) == 3.0
        assert default_th_out(3.5) == 3.0
        assert default_th_out(4.0) == 4.0


class TestRegisterCoarseToFine:
    def test_ratio_one_equals_one_stage(self):
        img_a, img_b, *_ = make_synthetic_pair(21, size=384, cells=10,
                                               magnitude=3.0)
        cfg1 = OneStageConfig(patch_size=192, patch_stride=144,
                              max_keypoints_per_patch=1000,
                              detect_threshold=0.05)
        one = register_one_stage(img_a, img_b, cfg1, seed=0)
        c2f = register_coarse_to_fine(img_a, img_b,
                                      CoarseToFineConfig(one_stage=cfg1),
                                      seed=0)
        assert np.array_equal(one.global_h.h, c2f.global_h.h)
        assert len(one.correspondences) == len(c2f.correspondences)

    def test_ratio_two_runs_and_reports_levels(self):
        from craquereg.imgcore import rescale

        img_a, img_b_full, net, gt = make_synthetic_pair(22, size=768,
                                                         cells=20,
                                                         magnitude=4.0)
        img_b = rescale(img_b_full, 0.5, "bicubic")
        cfg1 = OneStageConfig(patch_size=192, patch_stride=144,
                              max_keypoints_per_patch=1000,
                              detect_threshold=0.05)
        res = register_coarse_to_fine(img_a, img_b,
                                      CoarseToFineConfig(one_stage=cfg1),
                                      seed=0)
        assert len(res.stats["levels"]) == 1
        assert len(res.correspondences) >= 4
