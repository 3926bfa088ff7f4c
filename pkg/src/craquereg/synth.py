"""Synthetic craquelure generator with known junctions and GT distortions.

Crack networks are built from the edges of a jittered-grid Voronoi
subdivision, so junction ground truth (vertices of retained degree >= 3)
falls out of the combinatorics. All randomness flows from an integer seed
through numpy's default PCG64 generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import Voronoi

from .geometry import TpsModel, eval_tps, fit_tps
from .imgcore import Image


@dataclass
class CrackNetwork:
    segments: list[np.ndarray]          # each (K, 2) polyline
    junctions: np.ndarray               # (J, 2) points with degree >= 3
    bends: np.ndarray                   # (B, 2) degree-2 points, turn > 45 deg
    width: int = 0
    height: int = 0


@dataclass(frozen=True)
class ModalityParams:
    """Per-side rendering knobs simulating differing painted content."""

    texture_seed: int = 0
    texture_strength: float = 0.25
    invert: bool = False
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    gamma: float = 1.0


def _stroke(canvas: np.ndarray, p0: np.ndarray, p1: np.ndarray,
            width_px: float) -> None:
    """Accumulate anti-aliased stroke coverage for one segment."""
    h, w = canvas.shape
    half = width_px / 2.0
    margin = int(np.ceil(half + 1.5))
    x0 = max(int(np.floor(min(p0[0], p1[0]))) - margin, 0)
    x1 = min(int(np.ceil(max(p0[0], p1[0]))) + margin, w - 1)
    y0 = max(int(np.floor(min(p0[1], p1[1]))) - margin, 0)
    y1 = min(int(np.ceil(max(p0[1], p1[1]))) + margin, h - 1)
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    d = p1 - p0
    len2 = float(d @ d)
    px = xs - p0[0]
    py = ys - p0[1]
    if len2 < 1e-12:
        dist = np.hypot(px, py)
    else:
        t = np.clip((px * d[0] + py * d[1]) / len2, 0.0, 1.0)
        dist = np.hypot(px - t * d[0], py - t * d[1])
    cov = np.clip(half + 0.5 - dist, 0.0, 1.0)
    np.maximum(canvas[y0:y1 + 1, x0:x1 + 1], cov,
               out=canvas[y0:y1 + 1, x0:x1 + 1])


def generate_craquelure(seed: int, width: int, height: int,
                        density: float = 0.85,
                        cells: int | None = None) -> tuple[CrackNetwork, Image]:
    """Seeded crack network plus its rendered mask image.

    ``density`` is the retention probability per Voronoi edge; ``cells``
    controls the jittered seed grid (defaults to roughly one cell per 96 px).
    The mask has dark 1-2 px strokes on a light ground.
    """
    if not (0 < density <= 1):
        raise ValueError("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    if cells is None:
        cells = max(4, min(width, height) // 96)
    gx = np.linspace(0, width, cells + 1)[:-1] + width / (2 * cells)
    gy = np.linspace(0, height, cells + 1)[:-1] + height / (2 * cells)
    px, py = np.meshgrid(gx, gy)
    jitter = rng.uniform(-0.35, 0.35, size=(cells * cells, 2))
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    pts += jitter * np.array([width / cells, height / cells])
    # far-away guards keep all interior cells bounded
    guards = np.array([[-width, -height], [2 * width, -height],
                       [-width, 2 * height], [2 * width, 2 * height]], float)
    vor = Voronoi(np.vstack([pts, guards]))

    verts = vor.vertices + rng.uniform(-1.5, 1.5, size=vor.vertices.shape)
    margin = 2.0
    inside = ((verts[:, 0] > -margin) & (verts[:, 0] < width + margin)
              & (verts[:, 1] > -margin) & (verts[:, 1] < height + margin))

    def clip_to_canvas(p0, p1):
        """Liang-Barsky clip so border-crossing cracks still reach the edge."""
        d = p1 - p0
        t0, t1 = 0.0, 1.0
        for delta, lo_gap, hi_gap in ((d[0], p0[0], width - 1 - p0[0]),
                                      (d[1], p0[1], height - 1 - p0[1])):
            if abs(delta) < 1e-12:
                if lo_gap < 0 or hi_gap < 0:
                    return None
                continue
            ta, tb = -lo_gap / delta, hi_gap / delta
            if ta > tb:
                ta, tb = tb, ta
            t0, t1 = max(t0, ta), min(t1, tb)
            if t0 > t1:
                return None
        return p0 + t0 * d, p0 + t1 * d

    degree: dict[int, int] = {}
    edges: list[tuple[int, int]] = []
    segments: list[np.ndarray] = []
    for v0, v1 in vor.ridge_vertices:
        keep = rng.random() < density
        if v0 < 0 or v1 < 0 or not keep:
            continue
        if not (inside[v0] or inside[v1]):
            continue
        clipped = clip_to_canvas(verts[v0], verts[v1])
        if clipped is None:
            continue
        edges.append((v0, v1))
        segments.append(np.array([clipped[0], clipped[1]]))
        degree[v0] = degree.get(v0, 0) + 1
        degree[v1] = degree.get(v1, 0) + 1
    in_canvas = lambda p: 0 <= p[0] < width and 0 <= p[1] < height

    junctions = np.array([verts[v] for v, deg in sorted(degree.items())
                          if deg >= 3 and in_canvas(verts[v])])
    if junctions.size == 0:
        junctions = np.zeros((0, 2))

    bends = []
    adj: dict[int, list[int]] = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    for v, deg in sorted(degree.items()):
        if deg != 2 or not in_canvas(verts[v]):
            continue
        n0, n1 = adj[v]
        u0 = verts[n0] - verts[v]
        u1 = verts[n1] - verts[v]
        c = (u0 @ u1) / max(np.linalg.norm(u0) * np.linalg.norm(u1), 1e-12)
        # turn angle > 45 deg means the arms are less than 135 deg apart
        if c > np.cos(np.deg2rad(135.0)):
            bends.append(verts[v])
    bends_arr = np.array(bends) if bends else np.zeros((0, 2))

    coverage = np.zeros((height, width), dtype=np.float32)
    for (a, b), seg in zip(edges, segments):
        w_px = float(rng.uniform(1.0, 2.0))
        _stroke(coverage, seg[0], seg[1], w_px)
    mask = 0.88 * (1.0 - coverage) + 0.08 * coverage
    net = CrackNetwork(segments=segments, junctions=junctions, bends=bends_arr,
                       width=width, height=height)
    return net, Image(mask.astype(np.float32))


def _smooth_texture(seed: int, width: int, height: int,
                    strength: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((height, width)).astype(np.float32)
    tex = ndimage.gaussian_filter(noise, sigma=min(width, height) / 24.0)
    std = tex.std()
    if std > 1e-12:
        tex = tex / std
    return 0.6 + strength * 0.5 * tex


def render_modality(mask: Image, params: ModalityParams) -> Image:
    """Composite the shared crack mask over an independent base texture."""
    coverage = np.clip((0.88 - mask.data) / (0.88 - 0.08), 0.0, 1.0)
    tex = _smooth_texture(params.texture_seed, mask.width, mask.height,
                          params.texture_strength)
    img = tex * (1.0 - coverage) + 0.06 * coverage
    img = np.clip(img, 1e-4, 1.0) ** params.gamma
    if params.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=params.blur_sigma)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.texture_seed + 0x9E3779B9)
        img = img + rng.normal(0.0, params.noise_sigma, img.shape)
    if params.invert:
        img = 1.0 - img
    return Image(np.clip(img, 0.0, 1.0).astype(np.float32))


def render_modalities(mask: Image, params_a: ModalityParams,
                      params_b: ModalityParams) -> tuple[Image, Image]:
    return render_modality(mask, params_a), render_modality(mask, params_b)


def generate_gt_warp(seed: int, width: int, height: int, n_control: int = 16,
                     magnitude: float = 8.0) -> TpsModel:
    """Random smooth TPS distortion with exactly known control displacements.

    Control points sit on a jittered grid; displacements are uniform in
    [-magnitude, magnitude] per axis. The returned model is the exact dense
    ground-truth forward mapping (it interpolates the controls, lambda = 0).
    """
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    rng = np.random.default_rng(seed)
    side = max(2, int(round(np.sqrt(n_control))))
    gx = np.linspace(0.1, 0.9, side) * width
    gy = np.linspace(0.1, 0.9, side) * height
    cx, cy = np.meshgrid(gx, gy)
    src = np.stack([cx.ravel(), cy.ravel()], axis=1)[:n_control]
    if len(src) < max(3, n_control):
        extra = rng.uniform([0.1 * width, 0.1 * height],
                            [0.9 * width, 0.9 * height],
                            size=(max(3, n_control) - len(src), 2))
        src = np.vstack([src, extra])
    src = src + rng.uniform(-0.02, 0.02, src.shape) * np.array([width, height])
    disp = rng.uniform(-magnitude, magnitude, size=src.shape)
    return fit_tps(src, src + disp, lam=0.0)


def warp_network(net: CrackNetwork, gt: TpsModel,
                 step: float = 8.0) -> CrackNetwork:
    """Map a crack network through a GT warp (segments subdivided for curvature)."""
    segs = []
    for seg in net.segments:
        p0, p1 = seg[0], seg[-1]
        n = max(2, int(np.ceil(np.linalg.norm(p1 - p0) / step)) + 1)
        t = np.linspace(0.0, 1.0, n)[:, None]
        poly = p0[None] * (1 - t) + p1[None] * t
        segs.append(eval_tps(gt, poly))
    junctions = eval_tps(gt, net.junctions) if len(net.junctions) else net.junctions
    bends = eval_tps(gt, net.bends) if len(net.bends) else net.bends
    return CrackNetwork(segments=segs, junctions=junctions, bends=bends,
                        width=net.width, height=net.height)


def render_network_mask(net: CrackNetwork, seed: int = 0) -> Image:
    """Render a (possibly warped) network with the standard stroke style."""
    rng = np.random.default_rng(seed)
    coverage = np.zeros((net.height, net.width), dtype=np.float32)
    for seg in net.segments:
        w_px = float(rng.uniform(1.0, 2.0))
        for a, b in zip(seg[:-1], seg[1:]):
            _stroke(coverage, np.asarray(a, float), np.asarray(b, float), w_px)
    mask = 0.88 * (1.0 - coverage) + 0.08 * coverage
    return Image(mask.astype(np.float32))
