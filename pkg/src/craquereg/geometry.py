"""Homography and thin-plate-spline estimation plus windowed softargmax."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(Exception):
    """Raised for degenerate estimation problems."""


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, normalized so h33 = 1."""

    h: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.h, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError("homography must be 3x3")
        if abs(m[2, 2]) < 1e-12:
            raise GeometryError("degenerate homography (h33 ~ 0)")
        object.__setattr__(self, "h", m / m[2, 2])

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))


@dataclass(frozen=True)
class HomographyValidityConfig:
    """Bounds for accepting a local homography as physically plausible."""

    max_perspective: float = 1e-3
    diag_ratio_range: tuple[float, float] = (0.2, 5.0)
    min_det2x2: float = 1e-3

    def __post_init__(self):
        lo, hi = self.diag_ratio_range
        if not (0 < lo < hi) or self.max_perspective <= 0 or self.min_det2x2 <= 0:
            raise ValueError("invalid homography validity bounds")


@dataclass
class TpsModel:
    """Thin-plate spline: affine part + r^2 log r kernel on control points.

    Satisfies the usual side conditions (kernel weights sum to zero and are
    orthogonal to the control coordinates per output dimension).
    """

    control_points: np.ndarray  # (N, 2)
    affine: np.ndarray          # (2, 3): [a0, ax, ay] per output dim
    kernel_weights: np.ndarray  # (N, 2)
    regularization: float = 0.0


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 1e-12 else 1.0
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return t


def apply_homography(H: Homography, points: np.ndarray) -> np.ndarray:
    """Map (N, 2) points through the projective transform."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    m = H.h
    den = m[2, 0] * pts[:, 0] + m[2, 1] * pts[:, 1] + m[2, 2]
    if np.any(np.abs(den) < 1e-12):
        raise GeometryError("point maps to infinity")
    x = (m[0, 0] * pts[:, 0] + m[0, 1] * pts[:, 1] + m[0, 2]) / den
    y = (m[1, 0] * pts[:, 0] + m[1, 1] * pts[:, 1] + m[1, 2]) / den
    return np.stack([x, y], axis=1)


def fit_homography_dlt(src: np.ndarray, dst: np.ndarray,
                       weights: np.ndarray | None = None) -> Homography:
    """Weighted DLT with Hartley normalization of both point sets.

    Each correspondence contributes two rows scaled by sqrt(weight), which
    makes the algebraic least-squares problem weight-proportional; weight 0
    removes a pair exactly.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if weights is None:
        weights = np.ones(len(src))
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise GeometryError("weights must be non-negative")
    eff = weights > 0
    if eff.sum() < 4:
        raise GeometryError("need at least 4 pairs with positive weight")

    ts = _hartley_normalization(src[eff])
    td = _hartley_normalization(dst[eff])
    sh = np.column_stack([src, np.ones(len(src))]) @ ts.T
    dh = np.column_stack([dst, np.ones(len(dst))]) @ td.T

    n = len(src)
    a = np.zeros((2 * n, 9))
    x, y = sh[:, 0], sh[:, 1]
    u, v = dh[:, 0], dh[:, 1]
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = 1.0
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = 1.0
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v
    sw = np.sqrt(weights)
    a[0::2] *= sw[:, None]
    a[1::2] *= sw[:, None]

    _, svals, vt = np.linalg.svd(a, full_matrices=True)
    # the system needs rank 8 so the solution space is one-dimensional
    rank = int(np.sum(svals > 1e-12 * max(svals[0], 1.0)))
    if rank < 8:
        raise GeometryError("rank-deficient system (degenerate configuration)")
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ hn @ ts
    if abs(m[2, 2]) < 1e-12:
        raise GeometryError("degenerate homography (h33 ~ 0)")
    return Homography(m)


def reprojection_errors(H: Homography, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-pair Euclidean distance ||H(src_i) - dst_i|| (source to target)."""
    mapped = apply_homography(H, src)
    return np.sqrt(((mapped - np.atleast_2d(dst)) ** 2).sum(axis=1))


def check_homography_validity(
    H: Homography, cfg: HomographyValidityConfig | None = None
) -> tuple[bool, str]:
    """Gate a homography on perspective, diagonal and 2x2-determinant bounds.

    Returns (valid, reason); reason names the first failed test.
    """
    cfg = cfg or HomographyValidityConfig()
    m = H.h
    if abs(m[2, 0]) > cfg.max_perspective or abs(m[2, 1]) > cfg.max_perspective:
        return False, "perspective"
    lo, hi = cfg.diag_ratio_range
    if not (lo <= m[0, 0] <= hi and lo <= m[1, 1] <= hi):
        return False, "diagonal"
    det2 = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if det2 < cfg.min_det2x2:
        return False, "det2x2"
    return True, "ok"


# ---------------------------------------------------------------------------
# thin-plate splines

def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r = 0.5 * r^2 log r^2, with U(0) = 0.
    out = np.zeros_like(r2)
    mask = r2 > 0
    out[mask] = 0.5 * r2[mask] * np.log(r2[mask])
    return out


def fit_tps(src: np.ndarray, dst: np.ndarray, lam: float = 0.0) -> TpsModel:
    """Fit the standard TPS system mapping src -> dst.

    Coordinates are pre-scaled to a unit box for conditioning (control
    coordinates can reach tens of thousands of pixels); the coefficients are
    folded back so the stored model operates in original coordinates. With
    lam = 0 the model interpolates dst exactly.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 3:
        raise GeometryError("need at least 3 control points")
    if lam < 0:
        raise ValueError("regularization must be non-negative")

    t = src.min(axis=0)
    s = max(float((src.max(axis=0) - t).max()), 1e-12)
    q = (src - t) / s
    qd = (dst - t) / s

    d2 = ((q[:, None, :] - q[None, :, :]) ** 2).sum(axis=2)
    k = _tps_kernel(d2) + lam * np.eye(n)
    p = np.column_stack([np.ones(n), q])
    sys = np.zeros((n + 3, n + 3))
    sys[:n, :n] = k
    sys[:n, n:] = p
    sys[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = qd
    try:
        sol = np.linalg.solve(sys, rhs)
    except np.linalg.LinAlgError as exc:
        raise GeometryError(f"singular TPS system: {exc}") from exc
    w_hat = sol[:n]          # (N, 2) in unit-box coordinates
    a_hat = sol[n:]          # rows: const, x, y

    # Fold the unit-box similarity back into the coefficients. Under the
    # side conditions, U(r/s) terms differ from U(r)/s^2 only by a constant
    # that depends on sum_i w_i ||c_i||^2, absorbed into the translation.
    w = w_hat / s
    const_term = -s * np.log(s) * (w_hat * (q**2).sum(axis=1)[:, None]).sum(axis=0)
    a0 = s * a_hat[0] + t - (a_hat[1] * t[0] + a_hat[2] * t[1]) + const_term
    ax, ay = a_hat[1], a_hat[2]
    # affine rows: [a0, ax, ay] per output dimension
    affine = np.stack([np.array([a0[0], ax[0], ay[0]]),
                       np.array([a0[1], ax[1], ay[1]])])
    return TpsModel(control_points=src.copy(), affine=affine,
                    kernel_weights=w, regularization=lam)


def eval_tps(model: TpsModel, points: np.ndarray) -> np.ndarray:
    """Evaluate the spline at (N, 2) points."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a = model.affine
    out = (a[:, 0][None, :]
           + pts[:, 0:1] * a[:, 1][None, :]
           + pts[:, 1:2] * a[:, 2][None, :])
    d2 = ((pts[:, None, :] - model.control_points[None, :, :]) ** 2).sum(axis=2)
    out = out + _tps_kernel(d2) @ model.kernel_weights
    return out


def identity_tps(anchor: np.ndarray | None = None) -> TpsModel:
    """Identity spline (no control points would be degenerate; use 3 anchors)."""
    if anchor is None:
        anchor = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return TpsModel(control_points=np.asarray(anchor, dtype=np.float64),
                    affine=np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
                    kernel_weights=np.zeros((len(anchor), 2)))


# ---------------------------------------------------------------------------

def softargmax(window: np.ndarray, temperature: float = 0.1) -> tuple[float, float]:
    """Sub-pixel (dx, dy) offset of the soft peak from the window center.

    Scores are shifted by their maximum before exponentiation, so the result
    is invariant under adding a constant and never overflows.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    win = np.asarray(window, dtype=np.float64)
    if win.ndim != 2 or win.shape[0] != win.shape[1] or win.shape[0] % 2 != 1:
        raise ValueError("window must be square with odd size")
    w = win.shape[0]
    half = (w - 1) // 2
    z = np.exp((win - win.max()) / temperature)
    total = z.sum()
    coords = np.arange(w, dtype=np.float64) - half
    dx = float((z.sum(axis=0) * coords).sum() / total)
    dy = float((z.sum(axis=1) * coords).sum() / total)
    return dx, dy
