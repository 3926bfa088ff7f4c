"""Scikit-learn estimator API conformance for the registrar wrappers."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import make_synthetic_pair
from craquereg.estimators import CoarseToFineRegistrar, OneStageRegistrar
from craquereg.geometry import eval_tps


@pytest.fixture(scope="module")
def fitted_pair():
    img_a, img_b, net, gt = make_synthetic_pair(seed=21, size=512, cells=12,
                                                magnitude=5.0)
    reg = OneStageRegistrar(patch_size=512, patch_stride=384,
                            detect_threshold=0.05, seed=0)
    reg.fit(img_a, img_b)
    src = net.junctions
    dst = eval_tps(gt, src)
    return reg, img_a, img_b, (src, dst)


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        reg = OneStageRegistrar(patch_size=512, detect_threshold=0.05)
        params = reg.get_params()
        assert params["patch_size"] == 512
        reg.set_params(patch_size=256)
        assert reg.get_params()["patch_size"] == 256

    def test_clone_preserves_params(self):
        reg = CoarseToFineRegistrar(detect_threshold=0.07, th_out=2.0)
        dup = clone(reg)
        assert dup.get_params() == reg.get_params()
        assert dup is not reg

    def test_unfitted_transform_raises(self):
        with pytest.raises(NotFittedError):
            OneStageRegistrar().transform(np.zeros((3, 2)))

    def test_unfitted_warp_raises(self):
        with pytest.raises(NotFittedError):
            OneStageRegistrar().warp(np.zeros((16, 16), dtype=np.float32))

    def test_init_stores_params_verbatim(self):
        # sklearn contract: __init__ must not mutate or validate
        reg = OneStageRegistrar(patch_size=-5)
        assert reg.patch_size == -5


class TestFitTransform:
    def test_fit_returns_self_and_sets_state(self, fitted_pair):
        reg, *_ = fitted_pair
        assert hasattr(reg, "result_")
        assert reg.n_correspondences_ > 0

    def test_transform_accuracy(self, fitted_pair):
        reg, img_a, img_b, gt = fitted_pair
        src, dst = gt
        err = np.linalg.norm(reg.transform(src) - dst, axis=1)
        assert np.mean(err) < 3.0

    def test_transform_shape_and_single_point(self, fitted_pair):
        reg, *_ = fitted_pair
        out = reg.transform(np.array([100.0, 100.0]))
        assert out.shape == (1, 2)
        out = reg.transform(np.zeros((5, 2)))
        assert out.shape == (5, 2)

    def test_bad_points_rejected(self, fitted_pair):
        reg, *_ = fitted_pair
        with pytest.raises(ValueError):
            reg.transform(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            reg.transform(np.array([[np.nan, 0.0]]))

    def test_fit_accepts_tuple(self, fitted_pair):
        _, img_a, img_b, _ = fitted_pair
        reg = OneStageRegistrar(patch_size=512, patch_stride=384,
                                detect_threshold=0.05, seed=0)
        reg.fit((img_a, img_b))
        assert reg.n_correspondences_ > 0

    def test_bad_image_rejected(self):
        reg = OneStageRegistrar()
        with pytest.raises(ValueError):
            reg.fit(np.full((32, 32), 2.0, dtype=np.float32),
                    np.zeros((32, 32), dtype=np.float32))

    def test_warp_produces_image(self, fitted_pair):
        reg, img_a, img_b, _ = fitted_pair
        out = reg.warp(img_a)
        assert (out.width, out.height) == (img_a.width, img_a.height)
        # warped source should correlate better with the target than raw
        def corr(x, y):
            x = x - x.mean()
            y = y - y.mean()
            return float((x * y).sum() / np.sqrt((x * x).sum() * (y * y).sum()))
        inner = (slice(32, -32), slice(32, -32))
        assert corr(out.data[inner], img_b.data[inner]) > \
            corr(img_a.data[inner], img_b.data[inner])
