import numpy as np
import pytest

from craquereg import synth
from craquereg.imgcore import Image


def random_homography(rng, perspective=5e-4, scale_jitter=0.1,
                      translation=5.0):
    """A well-conditioned random projective transform for oracles."""
    h = np.eye(3)
    h[0, 0] = 1.0 + rng.uniform(-scale_jitter, scale_jitter)
    h[1, 1] = 1.0 + rng.uniform(-scale_jitter, scale_jitter)
    h[0, 1] = rng.uniform(-0.05, 0.05)
    h[1, 0] = rng.uniform(-0.05, 0.05)
    h[0, 2] = rng.uniform(-translation, translation)
    h[1, 2] = rng.uniform(-translation, translation)
    h[2, 0] = rng.uniform(-perspective, perspective)
    h[2, 1] = rng.uniform(-perspective, perspective)
    return h


def make_synthetic_pair(seed, size=768, cells=20, magnitude=5.0,
                        blur_b=0.5, density=0.9):
    """Crack-network pair with known TPS ground truth.

    Returns (image_a, image_b, network, gt_model); image_b shows the
    warped network rendered with an independent texture.
    """
    net, mask = synth.generate_craquelure(seed, size, size, density,
                                          cells=cells)
    gt = synth.generate_gt_warp(seed + 1, size, size, magnitude=magnitude)
    warped = synth.warp_network(net, gt)
    mask_b = synth.render_network_mask(warped, seed=seed)
    img_a = synth.render_modality(
        mask, synth.ModalityParams(texture_seed=seed * 2 + 1))
    img_b = synth.render_modality(
        mask_b, synth.ModalityParams(texture_seed=seed * 2 + 2,
                                     blur_sigma=blur_b))
    return img_a, img_b, net, gt


@pytest.fixture(scope="session")
def small_pair():
    return make_synthetic_pair(7, size=512, cells=14, magnitude=4.0)


def gaussian_blob_image(width, height, centers, sigma=6.0):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    acc = np.zeros((height, width))
    for cx, cy in centers:
        acc += np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))
    acc /= max(acc.max(), 1e-12)
    return Image(acc.astype(np.float32))
