"""Patch pairing, mutual-nearest-neighbor matching, per-pair quality gates
and duplicate filtering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detect import Keypoint
from .geometry import HomographyValidityConfig, check_homography_validity
from .robust import RobustError, robust_homography


@dataclass(frozen=True)
class Correspondence:
    """Matched keypoint pair in global image coordinates."""

    src: Keypoint
    dst: Keypoint
    confidence: float


def correspondences_to_arrays(cors) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not cors:
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)
    src = np.array([[c.src.x, c.src.y] for c in cors])
    dst = np.array([[c.dst.x, c.dst.y] for c in cors])
    conf = np.array([c.confidence for c in cors])
    return src, dst, conf


@dataclass(frozen=True)
class PatchGrid:
    """Covering grid of patch origins over an image."""

    image_width: int
    image_height: int
    patch_size: int
    stride: int
    origins: tuple[tuple[int, int], ...]

    def centers(self) -> np.ndarray:
        o = np.asarray(self.origins, dtype=np.float64)
        return o + self.patch_size / 2.0


@dataclass(frozen=True)
class MatchCriteria:
    """Acceptance gates for a patch pair's matches."""

    min_matches: int = 20
    min_inliers: int = 10
    inlier_threshold_px: float = 3.0
    validity: HomographyValidityConfig = field(default_factory=HomographyValidityConfig)
    ransac_iters: int = 1000

    def __post_init__(self):
        if self.min_inliers > self.min_matches:
            raise ValueError("min_inliers must not exceed min_matches")


def _axis_origins(extent: int, patch_size: int, stride: int) -> list[int]:
    if patch_size >= extent:
        return [0]
    xs = list(range(0, extent - patch_size + 1, stride))
    if xs[-1] + patch_size < extent:
        xs.append(extent - patch_size)
    return xs


def make_patch_grid(width: int, height: int, patch_size: int,
                    stride: int) -> PatchGrid:
    """Patch origins at stride multiples, last row/column shifted in-bounds."""
    if patch_size < 32:
        raise ValueError("patch_size must be at least 32")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    if patch_size > max(width, height):
        raise ValueError("patch_size exceeds both image dimensions")
    xs = _axis_origins(width, patch_size, stride)
    ys = _axis_origins(height, patch_size, stride)
    origins = tuple((x, y) for y in ys for x in xs)
    return PatchGrid(image_width=width, image_height=height,
                     patch_size=patch_size, stride=stride, origins=origins)


def candidate_pairs(grid_a: PatchGrid, grid_b: PatchGrid,
                    search_radius_patches: int = 1) -> list[tuple[int, int]]:
    """Pairs of patch indices whose normalized centers are nearby.

    Centers are normalized by their image extents so grids over
    different-resolution images of the same scene line up; the pairing
    radius is ``search_radius_patches`` strides (L-infinity).
    """
    ca = grid_a.centers() / np.array([grid_a.image_width, grid_a.image_height])
    cb = grid_b.centers() / np.array([grid_b.image_width, grid_b.image_height])
    tol_x = search_radius_patches * grid_a.stride / grid_a.image_width + 1e-9
    tol_y = search_radius_patches * grid_a.stride / grid_a.image_height + 1e-9
    pairs = []
    for i, c in enumerate(ca):
        near = (np.abs(cb[:, 0] - c[0]) <= tol_x) & (np.abs(cb[:, 1] - c[1]) <= tol_y)
        for j in np.nonzero(near)[0]:
            pairs.append((i, int(j)))
    return pairs


def mnn_match(desc_a: np.ndarray, desc_b: np.ndarray,
              max_ratio: float = 0.95) -> list[tuple[int, int, float]]:
    """Mutual nearest neighbors under Euclidean distance with a ratio gate.

    Confidence is 1 - d/2 clamped to [0, 1] (d in [0, 2] for unit vectors).
    """
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return []
    if a.shape[1] != b.shape[1]:
        raise ValueError("descriptor dimensions differ")
    d2 = np.maximum(
        (a * a).sum(axis=1)[:, None] - 2.0 * a @ b.T + (b * b).sum(axis=1)[None, :],
        0.0)
    nn_ab = d2.argmin(axis=1)
    nn_ba = d2.argmin(axis=0)
    out = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        if len(b) >= 2 and max_ratio < 1.0:
            row = d2[i]
            second = np.partition(row, 1)[1]
            if second > 0 and np.sqrt(row[j] / second) > max_ratio:
                continue
        d = float(np.sqrt(d2[i, j]))
        out.append((i, int(j), float(np.clip(1.0 - d / 2.0, 0.0, 1.0))))
    return out


@dataclass
class PatchPairResult:
    accepted: list[Correspondence]
    rejection: str | None = None
    homography: "Homography | None" = None


def evaluate_patch_pair(matches: list[Correspondence],
                        criteria: MatchCriteria | None = None,
                        seed: int = 0) -> PatchPairResult:
    """Apply the local-homography quality gates to one patch pair's matches.

    Rejection is a value, not an error: the result carries either the inlier
    correspondences or the name of the first failed gate.
    """
    criteria = criteria or MatchCriteria()
    if len(matches) <= criteria.min_matches:
        return PatchPairResult(accepted=[], rejection="too few matches")
    src, dst, _ = correspondences_to_arrays(matches)
    try:
        fit = robust_homography(src, dst, threshold=criteria.inlier_threshold_px,
                                max_iters=criteria.ransac_iters, seed=seed)
    except RobustError:
        return PatchPairResult(accepted=[], rejection="no homography")
    ok, reason = check_homography_validity(fit.homography, criteria.validity)
    if not ok:
        return PatchPairResult(accepted=[], rejection=f"invalid homography ({reason})")
    if int(fit.inlier_mask.sum()) <= criteria.min_inliers:
        return PatchPairResult(accepted=[], rejection="too few inliers")
    accepted = [m for m, keep in zip(matches, fit.inlier_mask) if keep]
    return PatchPairResult(accepted=accepted, homography=fit.homography)


def dedupe_points(correspondences: list[Correspondence],
                  radius_px: float = 4.0) -> list[Correspondence]:
    """Greedy confidence-ordered duplicate filter.

    A correspondence survives only if BOTH its source and target points are
    farther than ``radius_px`` from every already-kept source/target point.
    Ties are broken by (src.y, src.x) so the result is deterministic.
    """
    order = sorted(range(len(correspondences)),
                   key=lambda i: (-correspondences[i].confidence,
                                  correspondences[i].src.y,
                                  correspondences[i].src.x))
    cell = max(radius_px, 1e-9)
    buckets_src: dict[tuple[int, int], list[tuple[float, float]]] = {}
    buckets_dst: dict[tuple[int, int], list[tuple[float, float]]] = {}

    def clear(buckets, x, y):
        cx, cy = int(x // cell), int(y // cell)
        r2 = radius_px * radius_px
        for bx in (cx - 1, cx, cx + 1):
            for by in (cy - 1, cy, cy + 1):
                for px, py in buckets.get((bx, by), ()):
                    if (px - x) ** 2 + (py - y) ** 2 <= r2:
                        return False
        return True

    def put(buckets, x, y):
        buckets.setdefault((int(x // cell), int(y // cell)), []).append((x, y))

    kept = []
    for i in order:
        c = correspondences[i]
        if clear(buckets_src, c.src.x, c.src.y) and clear(buckets_dst, c.dst.x, c.dst.y):
            kept.append(c)
            put(buckets_src, c.src.x, c.src.y)
            put(buckets_dst, c.dst.x, c.dst.y)
    return kept


# ---------------------------------------------------------------------------
# external match text format: "xA yA xB yB confidence" per line, # comments

def write_matches_text(path: str, correspondences: list[Correspondence]) -> None:
    with open(path, "w") as f:
        f.write("# xA yA xB yB confidence\n")
        for c in correspondences:
            f.write(f"{c.src.x!r} {c.src.y!r} {c.dst.x!r} {c.dst.y!r} "
                    f"{c.confidence!r}\n")


def read_matches_text(path: str) -> list[Correspondence]:
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{ln}: expected 5 fields, got {len(parts)}")
            xa, ya, xb, yb, conf = map(float, parts)
            out.append(Correspondence(src=Keypoint(x=xa, y=ya, score=conf),
                                      dst=Keypoint(x=xb, y=yb, score=conf),
                                      confidence=conf))
    return out
