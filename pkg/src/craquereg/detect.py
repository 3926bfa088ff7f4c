"""Crack-structure keypoint detection, descriptors and feature volumes.

This is a classical stand-in for a learned detector: dark ridges are
enhanced with morphological black-hat filtering, branch points and sharp
bends of the skeletonized crack network become the keypoint response, and
descriptors are gradient-orientation histograms. Externally computed
detections can be injected through the binary exchange format below, so a
trained network can replace the whole stack without touching the pipeline.
"""

from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.morphology import disk, skeletonize

from .imgcore import Image, sample_grid


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float

    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


def keypoints_to_array(kps: list[Keypoint]) -> np.ndarray:
    if not kps:
        return np.zeros((0, 2))
    return np.array([[k.x, k.y] for k in kps], dtype=np.float64)


@dataclass
class FeatureVolume:
    """Per-pixel L2-normalized feature vectors, shape (H, W, C).

    Flat pixels (pre-normalization norm below 1e-8) are stored as exact
    zeros.
    """

    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def black_hat_response(gray: np.ndarray, radii=(1, 2, 3)) -> np.ndarray:
    """Dark-ridge enhancement: max over black-hat at several disk radii."""
    out = np.zeros_like(gray, dtype=np.float32)
    for r in radii:
        closed = ndimage.grey_closing(gray, footprint=disk(r))
        np.maximum(out, closed - gray, out=out)
    return out


_RING_RADIUS = 3
_RING_N = 16


def _ring_offsets() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ang = 2.0 * np.pi * np.arange(_RING_N) / _RING_N
    dx = np.round(_RING_RADIUS * np.cos(ang)).astype(int)
    dy = np.round(_RING_RADIUS * np.sin(ang)).astype(int)
    units = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return dx, dy, units


def crack_score_map(image: Image | np.ndarray, invert: bool = False) -> np.ndarray:
    """Junction/bend response map in [0, 1], same size as the input.

    Pipeline: black-hat ridge enhancement (radii 1..3) -> Otsu binarization
    -> skeleton -> per-pixel branch counting on a radius-3 ring (>= 3 arcs is
    a junction; 2 arcs with a strongly non-opposite arm layout is a bend) ->
    Gaussian smoothing (sigma 1) -> min-max normalization.
    """
    gray = image.gray() if isinstance(image, Image) else np.asarray(image, np.float32)
    if invert:
        gray = 1.0 - gray
    bh = black_hat_response(gray)
    if bh.max() <= 1e-8:
        return np.zeros_like(gray, dtype=np.float32)
    try:
        thr = threshold_otsu(bh)
    except ValueError:
        return np.zeros_like(gray, dtype=np.float32)
    ridge = bh > thr
    skel = skeletonize(ridge)

    dxs, dys, units = _ring_offsets()
    h, w = skel.shape
    ring = np.zeros((_RING_N, h, w), dtype=bool)
    for k, (dx, dy) in enumerate(zip(dxs, dys)):
        shifted = np.zeros_like(skel)
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        ys_src = slice(max(0, dy), min(h, h + dy))
        xs_src = slice(max(0, dx), min(w, w + dx))
        shifted[ys, xs] = skel[ys_src, xs_src]
        ring[k] = shifted

    arcs = np.zeros((h, w), dtype=np.int16)
    for k in range(_RING_N):
        arcs += (ring[k] & ~ring[k - 1]).astype(np.int16)
    hits = ring.sum(axis=0).astype(np.float32)

    resp = np.zeros((h, w), dtype=np.float32)
    junction = skel & (arcs >= 3)
    resp[junction] = 1.0

    # bends: two arms whose mean directions are far from opposite
    two = skel & (arcs == 2) & (hits > 0)
    if np.any(two):
        sx = np.tensordot(units[:, 0], ring.astype(np.float32), axes=(0, 0))
        sy = np.tensordot(units[:, 1], ring.astype(np.float32), axes=(0, 0))
        resultant = np.zeros((h, w), dtype=np.float32)
        resultant[two] = np.hypot(sx[two], sy[two]) / hits[two]
        # a 135-degree arm opening gives resultant cos(67.5 deg) ~ 0.38
        bend = np.clip((resultant - 0.38) / 0.62, 0.0, 1.0) * 0.8
        resp = np.maximum(resp, np.where(two, bend, 0.0))

    resp = ndimage.gaussian_filter(resp, sigma=1.0)
    top = resp.max()
    if top <= 1e-12:
        return np.zeros_like(resp)
    return ((resp - resp.min()) / (top - resp.min())).astype(np.float32)


def detect_keypoints(score_map: np.ndarray, nms_radius: float = 4.0,
                     threshold: float = 0.2,
                     max_count: int | None = None) -> list[Keypoint]:
    """Strict local maxima above ``threshold``, greedily NMS-thinned.

    Survivors are pairwise farther apart than ``nms_radius``; positions get
    sub-pixel offsets from a 3x3 quadratic fit around each peak.
    """
    sm = np.asarray(score_map, dtype=np.float32)
    h, w = sm.shape
    if h < 3 or w < 3:
        return []
    c = sm[1:-1, 1:-1]
    strict = np.ones_like(c, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            strict &= c > sm[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
    ys, xs = np.nonzero(strict & (c > threshold))
    ys = ys + 1
    xs = xs + 1
    if len(xs) == 0:
        return []
    scores = sm[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    xs, ys, scores = xs[order], ys[order], scores[order]

    # 3x3 quadratic sub-pixel refinement (separable) before NMS so the
    # spacing guarantee holds on the final coordinates
    fx = xs.astype(np.float64)
    fy = ys.astype(np.float64)
    for i, (x, y) in enumerate(zip(xs, ys)):
        if 1 <= x < w - 1 and 1 <= y < h - 1:
            den_x = sm[y, x - 1] - 2 * sm[y, x] + sm[y, x + 1]
            den_y = sm[y - 1, x] - 2 * sm[y, x] + sm[y + 1, x]
            if den_x < -1e-12:
                fx[i] += np.clip(0.5 * (sm[y, x - 1] - sm[y, x + 1]) / den_x,
                                 -0.5, 0.5)
            if den_y < -1e-12:
                fy[i] += np.clip(0.5 * (sm[y - 1, x] - sm[y + 1, x]) / den_y,
                                 -0.5, 0.5)

    kept_x: list[float] = []
    kept_y: list[float] = []
    kept: list[Keypoint] = []
    r2 = nms_radius * nms_radius
    for x, y, s in zip(fx, fy, scores):
        ok = True
        for kx, ky in zip(kept_x, kept_y):
            if (kx - x) ** 2 + (ky - y) ** 2 <= r2:
                ok = False
                break
        if not ok:
            continue
        kept_x.append(float(x))
        kept_y.append(float(y))
        kept.append(Keypoint(x=float(x), y=float(y),
                             score=float(np.clip(s, 0.0, 1.0))))
        if max_count is not None and len(kept) >= max_count:
            break
    return kept


# ---------------------------------------------------------------------------
# descriptors

_DESC_PATCH = 32
_DESC_CELLS = 4
_DESC_BINS = 8
DESCRIPTOR_DIM = _DESC_CELLS * _DESC_CELLS * _DESC_BINS


def compute_descriptors(image: Image | np.ndarray,
                        keypoints: list[Keypoint]) -> np.ndarray:
    """128-d gradient-orientation histograms (4x4 cells x 8 bins) per keypoint.

    Patches of 32x32 are sampled bilinearly at the sub-pixel centers,
    Gaussian-weighted, histogrammed, L2-normalized, clipped at 0.2 and
    renormalized. Returns an (N, 128) array of unit vectors.
    """
    plane = image.gray() if isinstance(image, Image) else np.asarray(image, np.float32)
    n = len(keypoints)
    if n == 0:
        return np.zeros((0, DESCRIPTOR_DIM))
    s = _DESC_PATCH
    offs = np.arange(s, dtype=np.float64) - (s - 1) / 2.0
    gy_off, gx_off = np.meshgrid(offs, offs, indexing="ij")
    centers = keypoints_to_array(keypoints)
    xs = centers[:, 0][:, None, None] + gx_off[None]
    ys = centers[:, 1][:, None, None] + gy_off[None]
    patches = sample_grid(plane.astype(np.float64), xs, ys)  # (N, 32, 32)

    dx = np.gradient(patches, axis=2)
    dy = np.gradient(patches, axis=1)
    mag = np.hypot(dx, dy)
    ori = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)

    sigma = s / 2.0
    gauss = np.exp(-(gx_off**2 + gy_off**2) / (2.0 * sigma * sigma))
    wmag = mag * gauss[None]

    # soft assignment between the two adjacent orientation bins
    fbin = ori / (2.0 * np.pi) * _DESC_BINS
    b0 = np.floor(fbin).astype(int) % _DESC_BINS
    b1 = (b0 + 1) % _DESC_BINS
    w1 = fbin - np.floor(fbin)
    w0 = 1.0 - w1

    cell = s // _DESC_CELLS
    cy = (np.arange(s) // cell)
    cell_y = cy[None, :, None]
    cell_x = cy[None, None, :]
    desc = np.zeros((n, _DESC_CELLS, _DESC_CELLS, _DESC_BINS))
    flat_cell = (cell_y * _DESC_CELLS + cell_x)
    for b, wgt in ((b0, w0), (b1, w1)):
        idx = (flat_cell * _DESC_BINS + b)
        np.add.at(desc.reshape(n, -1),
                  (np.repeat(np.arange(n), s * s),
                   np.broadcast_to(idx, (n, s, s)).reshape(-1)),
                  (wmag * wgt).reshape(-1))
    v = desc.reshape(n, -1)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    flat = norms[:, 0] < 1e-12
    norms[flat] = 1.0
    v = v / norms
    v = np.clip(v, 0.0, 0.2)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms[:, 0] < 1e-12] = 1.0
    v = v / norms
    v[flat] = 1.0 / np.sqrt(DESCRIPTOR_DIM)
    return v


# ---------------------------------------------------------------------------
# feature volumes

FEATURE_CHANNELS = 8


def build_feature_volume(image: Image | np.ndarray,
                         invert: bool = False) -> FeatureVolume:
    """8-channel crack-aware feature stack, L2-normalized per pixel.

    Channels: high-passed intensity, gradient magnitude, four rectified
    oriented gradients (0/45/90/135 degrees), black-hat crack response and
    its Gaussian-smoothed version.
    """
    gray = image.gray() if isinstance(image, Image) else np.asarray(image, np.float32)
    gray = gray.astype(np.float32)
    work = 1.0 - gray if invert else gray
    smooth = ndimage.gaussian_filter(work, sigma=1.0)
    gx = ndimage.sobel(smooth, axis=1) / 8.0
    gy = ndimage.sobel(smooth, axis=0) / 8.0
    hp = work - ndimage.gaussian_filter(work, sigma=8.0)
    bh = black_hat_response(work)
    chans = [
        hp,
        np.hypot(gx, gy),
        np.abs(gy),                      # horizontal structure (0 deg)
        np.abs(gx + gy) / np.sqrt(2.0),  # 45 deg structure
        np.abs(gx),                      # vertical structure (90 deg)
        np.abs(gx - gy) / np.sqrt(2.0),  # 135 deg structure
        bh,
        ndimage.gaussian_filter(bh, sigma=2.0),
    ]
    vol = np.stack(chans, axis=-1).astype(np.float32)
    norms = np.linalg.norm(vol, axis=-1, keepdims=True)
    flat = norms < 1e-8
    safe = np.where(flat, 1.0, norms)
    vol = vol / safe
    vol[np.broadcast_to(flat, vol.shape)] = 0.0
    return FeatureVolume(values=vol)


def upscale_external_score_map(coarse: np.ndarray, factor: int = 4) -> np.ndarray:
    """Bicubic x-factor upscaling for coarse externally computed score maps."""
    from .imgcore import rescale

    img = rescale(Image(np.clip(coarse, 0, 1).astype(np.float32)), float(factor),
                  method="bicubic")
    return img.data


# ---------------------------------------------------------------------------
# detection exchange format

_MAGIC = b"CRQD"
_VERSION = 1
SECTION_SCORE_TILE = 1
SECTION_FEATURE_TILE = 2


@dataclass
class DetectionTile:
    kind: int
    origin: tuple[int, int]
    width: int
    height: int
    channels: int
    payload: np.ndarray  # (height, width, channels) float32


@dataclass
class DetectionSet:
    keypoints: list[Keypoint]
    descriptors: np.ndarray
    tiles: list[DetectionTile]


class ExchangeFormatError(Exception):
    """Malformed detection exchange file; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def write_detections(path: str, det: DetectionSet) -> None:
    desc = np.asarray(det.descriptors, dtype=np.float32)
    dim = desc.shape[1] if desc.size else DESCRIPTOR_DIM
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HQH", _VERSION, len(det.keypoints), dim))
        for kp, d in zip(det.keypoints, desc):
            f.write(struct.pack("<ddf", kp.x, kp.y, kp.score))
            f.write(d.astype("<f4").tobytes())
        for tile in det.tiles:
            f.write(struct.pack("<BIIIIH", tile.kind, tile.origin[0],
                                tile.origin[1], tile.width, tile.height,
                                tile.channels))
            f.write(np.ascontiguousarray(tile.payload, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str):
    data = f.read(n)
    if len(data) != n:
        raise ExchangeFormatError(f"truncated file while reading {what}",
                                  f.tell() - len(data))
    return data


def read_detections(path: str) -> DetectionSet:
    """Parse the exchange format; renormalizes off-unit descriptors with a warning."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != _MAGIC:
            raise ExchangeFormatError("bad magic header", 0)
        version, count, dim = struct.unpack("<HQH", _read_exact(f, 12, "header"))
        if version != _VERSION:
            raise ExchangeFormatError(f"unsupported version {version}", 4)
        kps: list[Keypoint] = []
        descs = np.zeros((count, dim), dtype=np.float32)
        for i in range(count):
            x, y, s = struct.unpack("<ddf", _read_exact(f, 20, f"keypoint {i}"))
            kps.append(Keypoint(x=x, y=y, score=s))
            descs[i] = np.frombuffer(
                _read_exact(f, 4 * dim, f"descriptor {i}"), dtype="<f4")
        norms = np.linalg.norm(descs, axis=1) if count else np.zeros(0)
        bad = np.abs(norms - 1.0) > 1e-4
        if np.any(bad):
            warnings.warn(f"{int(bad.sum())} descriptors were not L2-normalized; "
                          "renormalizing", stacklevel=2)
            nz = norms > 1e-12
            descs[bad & nz] /= norms[bad & nz, None]
        tiles: list[DetectionTile] = []
        while True:
            head = f.read(19)
            if not head:
                break
            if len(head) != 19:
                raise ExchangeFormatError("truncated tile header",
                                          f.tell() - len(head))
            kind, ox, oy, w, h, c = struct.unpack("<BIIIIH", head)
            if kind not in (SECTION_SCORE_TILE, SECTION_FEATURE_TILE):
                raise ExchangeFormatError(f"unknown section kind {kind}",
                                          f.tell() - 19)
            payload = np.frombuffer(
                _read_exact(f, 4 * w * h * c, "tile payload"),
                dtype="<f4").reshape(h, w, c)
            tiles.append(DetectionTile(kind=kind, origin=(ox, oy), width=w,
                                       height=h, channels=c, payload=payload))
    return DetectionSet(keypoints=kps, descriptors=descs.astype(np.float64),
                        tiles=tiles)
