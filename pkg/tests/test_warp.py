"""Chunked backward warping: tiling, budget independence, accuracy."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from craquereg.detect import Keypoint
from craquereg.geometry import Homography, apply_homography, fit_tps
from craquereg.imgcore import Image
from craquereg.matching import Correspondence
from craquereg.warp import (DisplacementChunk, _chunk_boxes,
                            build_displacement_chunk, composite_backward,
                            fit_backward_transform, homography_backward,
                            identity_backward, warp_image_chunked)


def smooth_image(seed=0, size=128):
    rng = np.random.default_rng(seed)
    base = ndimage.gaussian_filter(rng.random((size, size)), 3.0)
    base = (base - base.min()) / (base.max() - base.min())
    return Image(base.astype(np.float32))


class TestChunkBoxes:
    @given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 5000))
    @settings(max_examples=60, deadline=None)
    def test_tiles_exactly_without_overlap(self, w, h, budget):
        cover = np.zeros((h, w), dtype=np.int32)
        for x0, y0, cw, ch in _chunk_boxes(w, h, budget):
            assert cw * ch <= max(budget, w)  # a row is never split thinner than 1
            cover[y0:y0 + ch, x0:x0 + cw] += 1
        assert np.all(cover == 1)

    def test_budget_within_limit(self):
        for x0, y0, cw, ch in _chunk_boxes(100, 100, 1000):
            assert cw * ch <= 1000


class TestBuildDisplacementChunk:
    def test_identity_gives_own_coordinates(self):
        chunk = build_displacement_chunk(identity_backward(), (3, 5, 4, 2))
        gx, gy = np.meshgrid(np.arange(3, 7), np.arange(5, 7))
        assert np.array_equal(chunk.dx, gx.astype(np.float32))
        assert np.array_equal(chunk.dy, gy.astype(np.float32))

    def test_translation_backward_map(self):
        fwd = Homography(np.array([[1, 0, 5], [0, 1, 0], [0, 0, 1]], float))
        chunk = build_displacement_chunk(homography_backward(fwd), (0, 0, 8, 8))
        gx, gy = np.meshgrid(np.arange(8), np.arange(8))
        assert np.allclose(chunk.dx, gx - 5, atol=1e-5)
        assert np.allclose(chunk.dy, gy, atol=1e-5)

    def test_zero_tps_residual_matches_pure_homography(self):
        h = Homography(np.array([[1.01, 0.02, -3.0],
                                 [-0.01, 0.99, 2.0],
                                 [1e-6, -1e-6, 1.0]]))
        anchors = np.array([[10.0, 10.0], [90.0, 12.0], [15.0, 88.0],
                            [85.0, 85.0], [50.0, 50.0]])
        tps = fit_tps(anchors, anchors)  # identity residual
        back = composite_backward(h.inverse(), tps)
        pure = homography_backward(h)
        a = build_displacement_chunk(back, (0, 0, 32, 32))
        b = build_displacement_chunk(pure, (0, 0, 32, 32))
        assert np.allclose(a.dx, b.dx, atol=1e-5)
        assert np.allclose(a.dy, b.dy, atol=1e-5)


class TestWarpImageChunked:
    def test_identity_exact(self):
        img = smooth_image(1)
        for method in ("bilinear", "bicubic"):
            out = warp_image_chunked(img, identity_backward(),
                                     (img.width, img.height), method=method)
            assert np.array_equal(out.data, img.data)

    def test_budget_independence_bit_identical(self):
        img = smooth_image(2, size=96)
        h = Homography(np.array([[1.02, 0.03, -2.0],
                                 [-0.02, 0.98, 3.0],
                                 [1e-5, -1e-5, 1.0]]))
        back = homography_backward(h)
        whole = warp_image_chunked(img, back, (96, 96),
                                   chunk_budget_px=96 * 96)
        for budget in (97, 500, 2048):
            tiled = warp_image_chunked(img, back, (96, 96),
                                       chunk_budget_px=budget)
            assert np.array_equal(whole.data, tiled.data)

    def test_grid_lines_land_at_analytic_positions(self):
        # white vertical lines every 16 px; translate by a known homography
        size = 128
        canvas = np.zeros((size, size), dtype=np.float32)
        cols = np.arange(24, size - 24, 16)
        canvas[:, cols] = 1.0
        img = Image(canvas)
        fwd = Homography(np.array([[1, 0, 3.0], [0, 1, 0], [0, 0, 1.0]]))
        out = warp_image_chunked(img, homography_backward(fwd),
                                 (size, size), method="bilinear")
        row = out.data[size // 2]
        for c in cols:
            expected = c + 3.0
            lo, hi = int(expected) - 2, int(expected) + 3
            seg = row[lo:hi]
            centroid = float((seg * np.arange(lo, hi)).sum() / seg.sum())
            assert abs(centroid - expected) < 0.5

    def test_roundtrip_h_then_inverse(self):
        img = smooth_image(3)
        h = Homography(np.array([[1.01, 0.015, 2.0],
                                 [-0.012, 0.99, -1.5],
                                 [2e-6, -1e-6, 1.0]]))
        once = warp_image_chunked(img, homography_backward(h),
                                  (img.width, img.height))
        back = warp_image_chunked(once, homography_backward(h.inverse()),
                                  (img.width, img.height))
        interior = (slice(16, -16), slice(16, -16))
        diff = np.abs(back.data[interior] - img.data[interior])
        assert diff.max() <= 0.05

    def test_outside_pixels_zero(self):
        img = smooth_image(4, size=32)
        fwd = Homography(np.array([[1, 0, -40.0], [0, 1, 0], [0, 0, 1.0]]))
        out = warp_image_chunked(img, homography_backward(fwd), (32, 32))
        assert np.all(out.data[:, 16:] == 0.0)

    def test_multichannel(self):
        rgb = Image(np.stack([smooth_image(s, 48).data for s in (5, 6, 7)],
                             axis=-1))
        out = warp_image_chunked(rgb, identity_backward(), (48, 48))
        assert out.channels == 3
        assert np.array_equal(out.data, rgb.data)

    def test_bad_inputs(self):
        img = smooth_image(8, size=16)
        with pytest.raises(ValueError):
            warp_image_chunked(img, identity_backward(), (0, 4))
        with pytest.raises(ValueError):
            warp_image_chunked(img, identity_backward(), (16, 16),
                               method="nearest")


class TestFitBackwardTransform:
    def test_recovers_inverse_of_forward_model(self):
        rng = np.random.default_rng(9)
        src = rng.uniform(10, 110, (60, 2))
        h = Homography(np.array([[1.02, 0.01, 4.0],
                                 [0.015, 0.98, -3.0],
                                 [1e-5, 2e-5, 1.0]]))
        dst = apply_homography(h, src)
        # add a smooth nonlinear residual
        dst = dst + 0.8 * np.sin(src / 25.0)
        corr = [Correspondence(src=Keypoint(s[0], s[1], 1.0),
                               dst=Keypoint(d[0], d[1], 1.0), confidence=1.0)
                for s, d in zip(src, dst)]
        back = fit_backward_transform(corr)
        mapped = back(dst)
        err = np.linalg.norm(mapped - src, axis=1)
        assert err.max() < 0.5
