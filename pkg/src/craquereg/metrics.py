"""Registration accuracy metrics on control points and overlay rendering."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .imgcore import Image


@dataclass
class ControlPointSet:
    """Manual (src, dst) control-point pairs with per-side scale tags."""

    src: np.ndarray
    dst: np.ndarray
    scale_a: float = 1.0
    scale_b: float = 1.0

    def __post_init__(self):
        self.src = np.atleast_2d(np.asarray(self.src, dtype=np.float64))
        self.dst = np.atleast_2d(np.asarray(self.dst, dtype=np.float64))
        if len(self.src) != len(self.dst) or len(self.src) < 1:
            raise ValueError("need at least one src/dst pair")
        if not (np.isfinite(self.src).all() and np.isfinite(self.dst).all()):
            raise ValueError("control points must be finite")

    def at_scale(self, scale_a: float, scale_b: float) -> "ControlPointSet":
        """Rescale annotations with the keypoint center convention."""
        fa = scale_a / self.scale_a
        fb = scale_b / self.scale_b
        return ControlPointSet(src=(self.src + 0.5) * fa - 0.5,
                               dst=(self.dst + 0.5) * fb - 0.5,
                               scale_a=scale_a, scale_b=scale_b)


@dataclass
class EvalReport:
    me: float
    mae: float
    sr_me: dict[float, float]
    sr_mae: dict[float, float]
    errors: np.ndarray

    def as_text(self) -> str:
        lines = [f"me {self.me:.6f}", f"mae {self.mae:.6f}"]
        for eps in sorted(self.sr_me):
            lines.append(f"sr@{eps:g} {self.sr_me[eps]:.6f} {self.sr_mae[eps]:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(transform: Callable[[np.ndarray], np.ndarray],
             cps: ControlPointSet,
             thresholds: tuple[float, ...] = (1.0, 2.0, 3.0, 5.0)) -> EvalReport:
    """Mean/max Euclidean error of warped source control points.

    The per-image success indicators ME < eps and MAE < eps are reported per
    threshold; aggregation over image pairs is the caller's mean of these.
    """
    mapped = transform(cps.src)
    errors = np.sqrt(((mapped - cps.dst) ** 2).sum(axis=1))
    me = float(errors.mean())
    mae = float(errors.max())
    sr_me = {float(e): float(me < e) for e in thresholds}
    sr_mae = {float(e): float(mae < e) for e in thresholds}
    return EvalReport(me=me, mae=mae, sr_me=sr_me, sr_mae=sr_mae, errors=errors)


def read_control_points(path: str) -> ControlPointSet:
    """Text format: optional header '#scaleA=<f> scaleB=<f>', then
    'xA yA xB yB' per line."""
    scale_a = scale_b = 1.0
    src, dst = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "scaleA=" in line:
                    for tok in line[1:].split():
                        k, _, v = tok.partition("=")
                        if k == "scaleA":
                            scale_a = float(v)
                        elif k == "scaleB":
                            scale_b = float(v)
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: expected 4 fields")
            xa, ya, xb, yb = map(float, parts)
            src.append((xa, ya))
            dst.append((xb, yb))
    if not src:
        raise ValueError(f"{path}: no control points")
    return ControlPointSet(src=np.array(src), dst=np.array(dst),
                           scale_a=scale_a, scale_b=scale_b)


def write_control_points(path: str, cps: ControlPointSet) -> None:
    with open(path, "w") as f:
        f.write(f"#scaleA={cps.scale_a:g} scaleB={cps.scale_b:g}\n")
        for s, d in zip(cps.src, cps.dst):
            f.write(f"{float(s[0])!r} {float(s[1])!r} "
                    f"{float(d[0])!r} {float(d[1])!r}\n")


# ---------------------------------------------------------------------------
# overlay rendering

_BLUE = (0.1, 0.3, 1.0)
_RED = (1.0, 0.15, 0.1)
_ORANGE = (1.0, 0.6, 0.05)
_GREEN = (0.1, 0.9, 0.2)


def _draw_segment(rgb: np.ndarray, p0, p1, color) -> None:
    """1-px anti-aliased segment via distance-to-segment coverage."""
    h, w = rgb.shape[:2]
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    x0 = max(int(np.floor(min(p0[0], p1[0]))) - 2, 0)
    x1 = min(int(np.ceil(max(p0[0], p1[0]))) + 2, w - 1)
    y0 = max(int(np.floor(min(p0[1], p1[1]))) - 2, 0)
    y1 = min(int(np.ceil(max(p0[1], p1[1]))) + 2, h - 1)
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    d = p1 - p0
    len2 = float(d @ d)
    px = xs - p0[0]
    py = ys - p0[1]
    t = np.clip((px * d[0] + py * d[1]) / len2, 0.0, 1.0) if len2 > 1e-12 else 0.0
    dist = np.hypot(px - t * d[0], py - t * d[1])
    alpha = np.clip(1.0 - dist, 0.0, 1.0)[..., None]
    region = rgb[y0:y1 + 1, x0:x1 + 1]
    region[:] = region * (1 - alpha) + np.array(color) * alpha


def _draw_disk(rgb: np.ndarray, center, radius: float, color) -> None:
    h, w = rgb.shape[:2]
    cx, cy = center
    x0 = max(int(np.floor(cx - radius - 1)), 0)
    x1 = min(int(np.ceil(cx + radius + 1)), w - 1)
    y0 = max(int(np.floor(cy - radius - 1)), 0)
    y1 = min(int(np.ceil(cy + radius + 1)), h - 1)
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    alpha = np.clip(radius + 0.5 - np.hypot(xs - cx, ys - cy), 0.0, 1.0)[..., None]
    region = rgb[y0:y1 + 1, x0:x1 + 1]
    region[:] = region * (1 - alpha) + np.array(color) * alpha


def render_overlay(image_a_warped: Image, image_b: Image,
                   vectors: list[tuple[np.ndarray, np.ndarray, bool]] | None = None,
                   keypoints_src: np.ndarray | None = None,
                   keypoints_dst: np.ndarray | None = None) -> Image:
    """Magenta/green false-color overlay with optional vectors and keypoints.

    ``vectors`` entries are (anchor, delta, kept); kept vectors are drawn
    blue, removed ones red. Source keypoints are green disks, target ones
    orange.
    """
    if (image_a_warped.width, image_a_warped.height) != (image_b.width, image_b.height):
        raise ValueError("overlay inputs must have equal sizes")
    a = image_a_warped.gray()
    b = image_b.gray()
    rgb = np.stack([a, b, a], axis=-1).astype(np.float64)
    if vectors:
        for anchor, delta, kept in vectors:
            _draw_segment(rgb, anchor, np.asarray(anchor) + np.asarray(delta),
                          _BLUE if kept else _RED)
    if keypoints_dst is not None:
        for p in np.atleast_2d(keypoints_dst):
            _draw_disk(rgb, p, 1.5, _ORANGE)
    if keypoints_src is not None:
        for p in np.atleast_2d(keypoints_src):
            _draw_disk(rgb, p, 1.5, _GREEN)
    return Image(np.clip(rgb, 0.0, 1.0).astype(np.float32))
