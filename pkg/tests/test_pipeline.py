import numpy as np
import pytest

from craquereg.geometry import Homography, apply_homography
from craquereg.matching import correspondences_to_arrays
from craquereg.pipeline import (
    OneStageConfig,
    RegistrationError,
    displacement_vectors,
    load_result,
    register_one_stage,
    save_result,
)
from craquereg.imgcore import Image
from craquereg.detect import Keypoint
from craquereg.matching import Correspondence

from conftest import make_synthetic_pair

CFG = OneStageConfig(patch_size=256, patch_stride=192,
                     max_keypoints_per_patch=1500, detect_threshold=0.05)


@pytest.fixture(scope="module")
def registered(small_pair_module):
    img_a, img_b, net, gt = small_pair_module
    res = register_one_stage(img_a, img_b, CFG, seed=0)
    return img_a, img_b, net, gt, res


@pytest.fixture(scope="module")
def small_pair_module():
    return make_synthetic_pair(7, size=512, cells=14, magnitude=4.0)


class TestRegisterOneStage:
    def test_self_registration_near_identity(self, small_pair_module):
        img_a = small_pair_module[0]
        res = register_one_stage(img_a, img_a, CFG, seed=0)
        assert np.max(np.abs(res.global_h.h - np.eye(3))) < 1e-3
        src, dst, _ = correspondences_to_arrays(res.correspondences)
        anchors = apply_homography(res.global_h, src)
        assert np.max(np.abs(dst - anchors)) < 0.5

    def test_textureless_failure(self):
        img = Image(np.full((512, 512), 0.5, dtype=np.float32))
        with pytest.raises(RegistrationError, match="no correspondences"):
            register_one_stage(img, img, CFG, seed=0)
        try:
            register_one_stage(img, img, CFG, seed=0)
        except RegistrationError as exc:
            assert isinstance(exc.stats, dict)

    def test_composite_transform_interpolates(self, registered):
        *_, res = registered
        src, dst, _ = correspondences_to_arrays(res.correspondences)
        mapped = res.transform(src)
        assert np.max(np.abs(mapped - dst)) < 1e-4

    def test_accuracy_against_gt(self, registered):
        img_a, img_b, net, gt, res = registered
        from craquereg.geometry import eval_tps

        src = net.junctions
        err = np.linalg.norm(res.transform(src) - eval_tps(gt, src), axis=1)
        assert err.mean() < 1.5

    def test_stats_monotonic(self, registered):
        *_, res = registered
        s = res.stats
        assert s["after_dedupe"] <= s["collected"]
        assert s["after_vfc"] <= s["after_dedupe"]
        assert len(res.correspondences) + len(res.rejected) == \
            s["after_dedupe"]

    def test_determinism_across_threads(self, small_pair_module):
        img_a, img_b, *_ = small_pair_module
        import dataclasses

        r1 = register_one_stage(img_a, img_b,
                                dataclasses.replace(CFG, threads=1), seed=3)
        r4 = register_one_stage(img_a, img_b,
                                dataclasses.replace(CFG, threads=4), seed=3)
        s1, d1, c1 = correspondences_to_arrays(r1.correspondences)
        s4, d4, c4 = correspondences_to_arrays(r4.correspondences)
        assert np.array_equal(s1, s4)
        assert np.array_equal(d1, d4)
        assert np.array_equal(c1, c4)
        assert np.array_equal(r1.global_h.h, r4.global_h.h)

    def test_same_seed_same_result(self, small_pair_module):
        img_a, img_b, *_ = small_pair_module
        r1 = register_one_stage(img_a, img_b, CFG, seed=9)
        r2 = register_one_stage(img_a, img_b, CFG, seed=9)
        s1, d1, _ = correspondences_to_arrays(r1.correspondences)
        s2, d2, _ = correspondences_to_arrays(r2.correspondences)
        assert np.array_equal(s1, s2) and np.array_equal(d1, d2)


class TestDisplacementVectors:
    def test_exact_homography_zero_delta(self):
        m = np.eye(3)
        m[0, 2] = 5.0
        h = Homography(m)
        src = np.array([[1.0, 2.0]])
        dst = apply_homography(h, src)
        cors = [Correspondence(src=Keypoint(x=1.0, y=2.0, score=1.0),
                               dst=Keypoint(x=dst[0, 0], y=dst[0, 1],
                                            score=1.0),
                               confidence=1.0)]
        vecs = displacement_vectors(h, cors)
        assert np.allclose(vecs[0][1], [0.0, 0.0])

    def test_offset_delta(self):
        h = Homography.identity()
        cors = [Correspondence(src=Keypoint(x=3.0, y=4.0, score=1.0),
                               dst=Keypoint(x=5.0, y=4.0, score=1.0),
                               confidence=1.0)]
        vecs = displacement_vectors(h, cors)
        assert np.allclose(vecs[0][0], [3.0, 4.0])
        assert np.allclose(vecs[0][1], [2.0, 0.0])

    def test_identity_src_eq_dst(self):
        cors = [Correspondence(src=Keypoint(x=1.0, y=1.0, score=1.0),
                               dst=Keypoint(x=1.0, y=1.0, score=1.0),
                               confidence=1.0)]
        anchor, delta = displacement_vectors(Homography.identity(), cors)[0]
        assert np.allclose(anchor, [1.0, 1.0]) and np.allclose(delta, 0.0)


class TestResultArchive:
    def test_round_trip(self, registered, tmp_path):
        *_, res = registered
        p = tmp_path / "r.crqr"
        save_result(str(p), res)
        back = load_result(str(p))
        assert np.array_equal(back.global_h.h, res.global_h.h)
        assert np.array_equal(back.tps.control_points,
                              res.tps.control_points)
        assert np.array_equal(back.tps.kernel_weights,
                              res.tps.kernel_weights)
        assert len(back.correspondences) == len(res.correspondences)
        assert back.stats == res.stats

    def test_save_twice_byte_identical(self, registered, tmp_path):
        *_, res = registered
        p1, p2 = tmp_path / "a.crqr", tmp_path / "b.crqr"
        save_result(str(p1), res)
        save_result(str(p2), res)
        assert p1.read_bytes() == p2.read_bytes()

    def test_transform_survives_round_trip(self, registered, tmp_path):
        *_, res = registered
        p = tmp_path / "t.crqr"
        save_result(str(p), res)
        back = load_result(str(p))
        pts = np.random.default_rng(0).uniform(0, 500, (20, 2))
        assert np.allclose(back.transform(pts), res.transform(pts),
                           atol=1e-12)
