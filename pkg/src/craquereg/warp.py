"""Memory-bounded backward warping of large images.

The output space is tiled into chunks; each chunk's backward-mapped source
coordinates determine a small source window, so arbitrarily large images
can be warped with a fixed working set. Because integer/fractional parts of
the source coordinates are computed from the global transform before any
windowing, the result is bit-identical for every chunk budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .geometry import Homography, TpsModel, apply_homography, eval_tps, fit_tps
from .imgcore import Image, _catmull_rom_weights
from .matching import Correspondence, correspondences_to_arrays

DEFAULT_CHUNK_BUDGET_PX = 64_000_000

# a backward transform maps output-space (N, 2) points to source coordinates
BackwardTransform = Callable[[np.ndarray], np.ndarray]


@dataclass
class DisplacementChunk:
    origin: tuple[int, int]
    width: int
    height: int
    dx: np.ndarray  # per-pixel source x (f32)
    dy: np.ndarray


def homography_backward(H: Homography) -> BackwardTransform:
    """Backward map for a forward source->target homography."""
    inv = H.inverse()
    return lambda pts: apply_homography(inv, pts)


def composite_backward(h_back: Homography, tps_back: TpsModel) -> BackwardTransform:
    """Backward map for an inverse-fitted homography + residual TPS."""
    return lambda pts: eval_tps(tps_back, apply_homography(h_back, pts))


def fit_backward_transform(correspondences: list[Correspondence],
                           lam: float = 0.0) -> BackwardTransform:
    """Fit the inverse model (target -> source) on the same correspondences.

    TPS has no closed-form inverse, so backward warping fits a fresh model
    with the point roles swapped and evaluates it directly.
    """
    from .geometry import fit_homography_dlt

    src, dst, conf = correspondences_to_arrays(correspondences)
    h_back = fit_homography_dlt(dst, src, conf)
    anchors = apply_homography(h_back, dst)
    tps_back = fit_tps(anchors, src, lam=lam)
    return composite_backward(h_back, tps_back)


def identity_backward() -> BackwardTransform:
    return lambda pts: np.asarray(pts, dtype=np.float64)


def _chunk_boxes(out_w: int, out_h: int,
                 budget_px: int) -> Iterator[tuple[int, int, int, int]]:
    budget_px = max(1, int(budget_px))
    cw = min(out_w, budget_px)
    ch = max(1, min(out_h, budget_px // cw))
    for y0 in range(0, out_h, ch):
        for x0 in range(0, out_w, cw):
            yield x0, y0, min(cw, out_w - x0), min(ch, out_h - y0)


# transform evaluation and resampling stream over bounded point blocks so
# peak memory stays flat even for a whole-image chunk; per-pixel arithmetic
# is elementwise, so the block size never changes the result
_POINT_BLOCK = 2_000_000


def build_displacement_chunk(transform: BackwardTransform,
                             bbox: tuple[int, int, int, int]) -> DisplacementChunk:
    """Per-output-pixel source coordinates for one chunk bbox (x, y, w, h)."""
    x0, y0, w, h = bbox
    dx = np.empty((h, w), dtype=np.float32)
    dy = np.empty((h, w), dtype=np.float32)
    rows_per_block = max(1, _POINT_BLOCK // max(w, 1))
    xs = np.arange(x0, x0 + w, dtype=np.float64)
    for r0 in range(0, h, rows_per_block):
        r1 = min(r0 + rows_per_block, h)
        ys = np.arange(y0 + r0, y0 + r1, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        mapped = transform(pts)
        dx[r0:r1] = mapped[:, 0].reshape(r1 - r0, w).astype(np.float32)
        dy[r0:r1] = mapped[:, 1].reshape(r1 - r0, w).astype(np.float32)
    return DisplacementChunk(origin=(x0, y0), width=w, height=h, dx=dx, dy=dy)


def _gather_fill(plane: np.ndarray, ix: np.ndarray, iy: np.ndarray,
                 x0: int, y0: int) -> np.ndarray:
    """Clamped gather from a source window given global integer indices."""
    h, w = plane.shape[:2]
    return plane[np.clip(iy - y0, 0, h - 1), np.clip(ix - x0, 0, w - 1)]


def _warp_chunk(src: np.ndarray, chunk: DisplacementChunk,
                method: str) -> np.ndarray:
    if src.ndim == 3:
        out = np.empty((chunk.height, chunk.width, src.shape[2]),
                       dtype=np.float32)
    else:
        out = np.empty((chunk.height, chunk.width), dtype=np.float32)
    rows_per_block = max(1, _POINT_BLOCK // max(chunk.width, 1))
    for r0 in range(0, chunk.height, rows_per_block):
        r1 = min(r0 + rows_per_block, chunk.height)
        out[r0:r1] = _warp_block(src, chunk.dx[r0:r1], chunk.dy[r0:r1], method)
    return out


def _warp_block(src: np.ndarray, dx: np.ndarray, dy: np.ndarray,
                method: str) -> np.ndarray:
    sh, sw = src.shape[:2]
    x = dx.astype(np.float64)
    y = dy.astype(np.float64)
    valid = (x >= 0) & (x <= sw - 1) & (y >= 0) & (y <= sh - 1)
    ix = np.floor(x).astype(np.int64)
    iy = np.floor(y).astype(np.int64)
    fx = x - ix
    fy = y - iy

    margin = 2
    if valid.any():
        x0 = max(int(ix[valid].min()) - margin, 0)
        x1 = min(int(ix[valid].max()) + margin + 2, sw)
        y0 = max(int(iy[valid].min()) - margin, 0)
        y1 = min(int(iy[valid].max()) + margin + 2, sh)
    else:
        x0 = y0 = 0
        x1 = y1 = 1
    window = src[y0:y1, x0:x1]

    multi = src.ndim == 3
    if multi:
        fx_b = fx[..., None]
        fy_b = fy[..., None]
    else:
        fx_b, fy_b = fx, fy

    if method == "bilinear":
        v00 = _gather_fill(window, ix, iy, x0, y0)
        v10 = _gather_fill(window, ix + 1, iy, x0, y0)
        v01 = _gather_fill(window, ix, iy + 1, x0, y0)
        v11 = _gather_fill(window, ix + 1, iy + 1, x0, y0)
        top = v00 + fx_b * (v10 - v00)
        bot = v01 + fx_b * (v11 - v01)
        out = top + fy_b * (bot - top)
    elif method == "bicubic":
        wx = _catmull_rom_weights(fx)
        wy = _catmull_rom_weights(fy)
        if multi:
            wx = [w[..., None] for w in wx]
            wy = [w[..., None] for w in wy]
        out = None
        for j in range(4):
            row = None
            for i in range(4):
                v = _gather_fill(window, ix + i - 1, iy + j - 1, x0, y0) * wx[i]
                row = v if row is None else row + v
            row = row * wy[j]
            out = row if out is None else out + row
    else:
        raise ValueError(f"unknown method {method!r}")

    mask = valid[..., None] if multi else valid
    return np.where(mask, out, 0.0)


def warp_image_chunked(src: Image, transform: BackwardTransform,
                       out_size: tuple[int, int],
                       chunk_budget_px: int = DEFAULT_CHUNK_BUDGET_PX,
                       method: str = "bicubic") -> Image:
    """Backward-warp ``src`` into an output of (width, height).

    Pixels mapping outside the source are 0. The result is independent of
    the chunk budget.
    """
    out_w, out_h = out_size
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be at least 1x1")
    if src.channels == 1:
        out = np.zeros((out_h, out_w), dtype=np.float32)
    else:
        out = np.zeros((out_h, out_w, src.channels), dtype=np.float32)
    for bbox in _chunk_boxes(out_w, out_h, chunk_budget_px):
        chunk = build_displacement_chunk(transform, bbox)
        x0, y0, w, h = bbox
        out[y0:y0 + h, x0:x0 + w] = _warp_chunk(src.data, chunk, method)
    return Image(np.clip(out, 0.0, 1.0).astype(np.float32),
                 bit_depth=src.bit_depth)
