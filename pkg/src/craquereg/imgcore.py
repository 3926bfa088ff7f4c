"""Image containers, loading, rescaling and sub-pixel sampling.

Images are stored as float32 arrays with intensities in [0, 1] regardless of
the source bit depth, so the rest of the library has a single numeric path.
All interpolation uses clamp-to-edge border handling; "bicubic" means the
Catmull-Rom kernel (a = -0.5).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from PIL import Image as PILImage
import tifffile


class ImageError(Exception):
    """Raised for unreadable, unsupported or degenerate image files."""


@dataclass(frozen=True)
class Image:
    """In-memory raster with intensities normalized to [0, 1].

    ``data`` has shape (height, width) for grayscale or (height, width, 3)
    for RGB. Instances are immutable; operations return new images.
    """

    data: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        if self.data.ndim not in (2, 3):
            raise ImageError(f"expected 2D or 3D array, got ndim={self.data.ndim}")
        if self.data.ndim == 3 and self.data.shape[2] != 3:
            raise ImageError(f"expected 3 channels, got {self.data.shape[2]}")
        if self.width < 1 or self.height < 1:
            raise ImageError("zero-sized image")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    def gray(self) -> np.ndarray:
        """Grayscale view (ITU-R 601 luminance for RGB)."""
        if self.data.ndim == 2:
            return self.data
        return (
            0.299 * self.data[:, :, 0]
            + 0.587 * self.data[:, :, 1]
            + 0.114 * self.data[:, :, 2]
        ).astype(np.float32)


@dataclass(frozen=True)
class PatchSpec:
    """Extraction window: ``center`` in sub-pixel (x, y), ``size`` pixels per side."""

    center: tuple[float, float]
    size: int
    level: int = 0
    subpixel: bool = False

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("patch size must be positive")


def _normalize_array(raw: np.ndarray, bit_depth: int, normalize: str) -> np.ndarray:
    raw = raw.astype(np.float64)
    if normalize == "minmax":
        lo, hi = raw.min(), raw.max()
        if hi <= lo:
            return np.zeros_like(raw, dtype=np.float32)
        return ((raw - lo) / (hi - lo)).astype(np.float32)
    if normalize == "none":
        return (raw / float(2**bit_depth - 1)).astype(np.float32)
    raise ValueError(f"unknown normalization {normalize!r}")


def _read_raw(path: str) -> tuple[np.ndarray, int]:
    ext = os.path.splitext(path)[1].lower()
    if not os.path.exists(path):
        raise ImageError(f"file not found: {path}")
    try:
        if ext in (".tif", ".tiff"):
            raw = tifffile.imread(path)
        else:
            raw = np.asarray(PILImage.open(path))
    except ImageError:
        raise
    except Exception as exc:
        raise ImageError(f"unreadable file {path}: {exc}") from exc
    if raw.dtype == np.uint8:
        depth = 8
    elif raw.dtype == np.uint16:
        depth = 16
    else:
        raise ImageError(f"unsupported dtype {raw.dtype} in {path}")
    if raw.ndim == 3 and raw.shape[2] == 4:
        raw = raw[:, :, :3]
    if raw.ndim == 3 and raw.shape[2] == 3 and depth == 16:
        raise ImageError("16-bit RGB is not supported")
    if raw.ndim not in (2, 3) or raw.size == 0:
        raise ImageError(f"unsupported layout {raw.shape} in {path}")
    return raw, depth


def load_image(path: str, normalize: str = "minmax") -> Image:
    """Load a PNG/TIFF raster, mapping intensities to [0, 1].

    ``normalize="minmax"`` maps the observed min to 0 and max to 1 (constant
    images become all-zeros); ``"none"`` scales by the bit-depth maximum.
    """
    raw, depth = _read_raw(path)
    return Image(_normalize_array(raw, depth, normalize), bit_depth=depth)


def iter_strips(path: str, memory_budget_bytes: int = 2 << 30,
                normalize: str = "none") -> Iterator[tuple[int, Image]]:
    """Stream a raster in horizontal strips of (y_offset, strip image).

    Strip heights are chosen so each decoded strip stays within the working
    budget. For strip-organized TIFFs only the needed rows are decoded.
    """
    ext = os.path.splitext(path)[1].lower()
    if ext in (".tif", ".tiff"):
        with tifffile.TiffFile(path) as tif:
            page = tif.pages[0]
            h, w = page.shape[0], page.shape[1]
            nch = 1 if page.ndim == 2 else page.shape[2]
            bytes_per_row = w * nch * 8  # float64 during normalization
            rows = max(1, min(h, memory_budget_bytes // max(1, bytes_per_row)))
            depth = 8 if page.dtype == np.uint8 else 16
            store = page.asarray(out="memmap") if page.is_memmappable else page.asarray()
            for y0 in range(0, h, rows):
                block = np.asarray(store[y0:y0 + rows])
                yield y0, Image(_normalize_array(block, depth, normalize), bit_depth=depth)
        return
    img = load_image(path, normalize=normalize)
    bytes_per_row = img.width * img.channels * 4
    rows = max(1, min(img.height, memory_budget_bytes // max(1, bytes_per_row)))
    for y0 in range(0, img.height, rows):
        yield y0, Image(img.data[y0:y0 + rows], bit_depth=img.bit_depth)


def save_image(image: Image, path: str) -> None:
    """Write an image as 8-bit PNG or TIFF (values clipped to [0, 1])."""
    arr = np.clip(image.data, 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    ext = os.path.splitext(path)[1].lower()
    if ext in (".tif", ".tiff"):
        tifffile.imwrite(path, u8)
    else:
        PILImage.fromarray(u8).save(path)


# ---------------------------------------------------------------------------
# interpolation

def _gather(plane: np.ndarray, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    h, w = plane.shape[:2]
    return plane[np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)]


def _sample_bilinear(plane: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0).astype(plane.dtype if plane.dtype.kind == "f" else np.float64)
    fy = (y - y0).astype(fx.dtype)
    if plane.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = _gather(plane, x0, y0)
    v10 = _gather(plane, x0 + 1, y0)
    v01 = _gather(plane, x0, y0 + 1)
    v11 = _gather(plane, x0 + 1, y0 + 1)
    top = v00 + fx * (v10 - v00)
    bot = v01 + fx * (v11 - v01)
    return top + fy * (bot - top)


def _catmull_rom_weights(t: np.ndarray) -> list[np.ndarray]:
    # Catmull-Rom (a = -0.5) weights for offsets -1, 0, 1, 2.
    t2 = t * t
    t3 = t2 * t
    return [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]


def _sample_bicubic(plane: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    wx = _catmull_rom_weights(fx)
    wy = _catmull_rom_weights(fy)
    if plane.ndim == 3:
        wx = [w[..., None] for w in wx]
        wy = [w[..., None] for w in wy]
    out = None
    for j in range(4):
        row = None
        for i in range(4):
            v = _gather(plane, x0 + i - 1, y0 + j - 1) * wx[i]
            row = v if row is None else row + v
        row = row * wy[j]
        out = row if out is None else out + row
    return out


def sample(image: Image | np.ndarray, points: np.ndarray,
           method: str = "bilinear") -> np.ndarray:
    """Sample intensities at sub-pixel (x, y) points with clamp-to-edge.

    Returns shape (N,) for grayscale or (N, C) for multi-channel input.
    Integer coordinates reproduce pixel values exactly for both methods.
    """
    plane = image.data if isinstance(image, Image) else np.asarray(image)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y = pts[:, 0], pts[:, 1]
    if method == "bilinear":
        return _sample_bilinear(plane, x, y)
    if method == "bicubic":
        return _sample_bicubic(plane, x, y)
    raise ValueError(f"unknown method {method!r}")


def sample_grid(plane: np.ndarray, x: np.ndarray, y: np.ndarray,
                method: str = "bilinear") -> np.ndarray:
    """Sample at broadcastable coordinate arrays (clamp-to-edge)."""
    if method == "bilinear":
        return _sample_bilinear(plane, x, y)
    if method == "bicubic":
        return _sample_bicubic(plane, x, y)
    raise ValueError(f"unknown method {method!r}")


def rescale(image: Image, factor: float, method: str = "bicubic") -> Image:
    """Resample by ``factor`` using the pixel-center convention.

    Output pixel j samples the source at (j + 0.5) / factor - 0.5, so
    keypoints rescaled via the same convention stay attached to content.
    """
    if factor <= 0:
        raise ValueError("factor must be positive")
    out_w = int(round(image.width * factor))
    out_h = int(round(image.height * factor))
    if out_w < 1 or out_h < 1:
        raise ValueError(f"factor {factor} collapses image to zero size")
    if factor == 1.0:
        return Image(image.data.copy(), bit_depth=image.bit_depth)
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) / factor - 0.5
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) / factor - 0.5
    gx, gy = np.meshgrid(xs, ys)
    out = sample_grid(image.data, gx, gy, method=method)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return Image(out, bit_depth=image.bit_depth)


def extract_patch(image: Image, spec: PatchSpec) -> Image:
    """Extract a square patch, clamp-padded at the borders.

    Integer-center mode (default) centers the window at round(center);
    sub-pixel mode resamples bilinearly at offsets around the exact center.
    """
    s = spec.size
    if spec.subpixel:
        offs = np.arange(s, dtype=np.float64) - (s - 1) / 2.0
        gx, gy = np.meshgrid(spec.center[0] + offs, spec.center[1] + offs)
        data = sample_grid(image.data, gx, gy, method="bilinear")
        return Image(data.astype(np.float32), bit_depth=image.bit_depth)
    cx = int(round(spec.center[0]))
    cy = int(round(spec.center[1]))
    half = s // 2
    xs = np.clip(np.arange(cx - half, cx - half + s), 0, image.width - 1)
    ys = np.clip(np.arange(cy - half, cy - half + s), 0, image.height - 1)
    data = image.data[np.ix_(ys, xs)]
    return Image(np.ascontiguousarray(data), bit_depth=image.bit_depth)
