"""Robust homography estimation and vector-field-consensus match filtering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    GeometryError,
    Homography,
    fit_homography_dlt,
    reprojection_errors,
)


class RobustError(Exception):
    """Raised when no acceptable model can be found."""


@dataclass
class RobustFitResult:
    homography: Homography
    inlier_mask: np.ndarray
    score: float


@dataclass(frozen=True)
class VfcParams:
    """EM parameters for vector field consensus on unit-normalized coordinates."""

    kernel_beta: float = 0.1
    lam: float = 3.0
    gamma_init: float = 0.9
    outlier_variance: float = 10.0
    max_iter: int = 500
    tol: float = 1e-8

    def __post_init__(self):
        if not (0 < self.gamma_init < 1):
            raise ValueError("gamma_init must lie in (0, 1)")
        if min(self.kernel_beta, self.lam, self.outlier_variance, self.tol) <= 0:
            raise ValueError("VFC parameters must be positive")


@dataclass
class VfcResult:
    inlier_mask: np.ndarray
    posteriors: np.ndarray
    skipped: bool = False
    duplicates_dropped: int = 0
    objective_trace: list = field(default_factory=list)


def _sample_is_degenerate(pts: np.ndarray) -> bool:
    # any 3 of the 4 points collinear
    for skip in range(4):
        p = np.delete(pts, skip, axis=0)
        area = abs((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                   - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1]))
        if area < 1e-9:
            return True
    return False


def robust_homography(src: np.ndarray, dst: np.ndarray, threshold: float = 3.0,
                      max_iters: int = 1000, seed: int = 0) -> RobustFitResult:
    """MSAC homography with local optimization, deterministic given ``seed``.

    Minimal 4-point samples are scored by truncated squared reprojection
    error; the best model is polished by 3 rounds of weighted DLT on its
    inliers with weights 1 - (e/threshold)^2.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 4:
        raise RobustError("insufficient pairs (need at least 4)")
    rng = np.random.default_rng(seed)
    t2 = threshold * threshold

    best_score = np.inf
    best_h: Homography | None = None
    for _ in range(max_iters):
        idx = rng.choice(n, size=4, replace=False)
        if _sample_is_degenerate(src[idx]) or _sample_is_degenerate(dst[idx]):
            continue
        try:
            h = fit_homography_dlt(src[idx], dst[idx])
            err = reprojection_errors(h, src, dst)
        except GeometryError:
            continue
        score = np.minimum(err * err, t2).sum()
        if score < best_score:
            best_score = score
            best_h = h

    if best_h is None:
        raise RobustError("no valid minimal sample found")

    h = best_h
    for _ in range(3):
        err = reprojection_errors(h, src, dst)
        inl = err <= threshold
        if inl.sum() < 4:
            break
        w = np.clip(1.0 - (err / threshold) ** 2, 0.0, 1.0)
        w[~inl] = 0.0
        try:
            h = fit_homography_dlt(src, dst, w)
        except GeometryError:
            break

    err = reprojection_errors(h, src, dst)
    mask = err <= threshold
    if mask.sum() < 4:
        # local optimization can drift on tiny/contaminated sets; fall back
        err = reprojection_errors(best_h, src, dst)
        mask = err <= threshold
        h = best_h
        if mask.sum() < 4:
            raise RobustError("no model with at least 4 inliers")
    score = float(np.minimum(err * err, t2).sum())
    return RobustFitResult(homography=h, inlier_mask=mask, score=score)


# ---------------------------------------------------------------------------
# vector field consensus

def vfc_filter(src: np.ndarray, dst: np.ndarray,
               params: VfcParams | None = None) -> VfcResult:
    """Classify correspondences as inliers of a smooth displacement field.

    A Gaussian-kernel vector field is fit to the src -> dst displacements by
    EM: the E-step assigns each pair a posterior inlier probability, the
    M-step re-solves the ridge-regularized field coefficients and updates the
    noise variance and inlier fraction. Pairs with posterior > 0.5 are kept.
    Below 5 pairs the filter is skipped (all-inlier) as the field would be
    unconstrained.
    """
    params = params or VfcParams()
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n_all = len(src)
    if n_all < 5:
        return VfcResult(inlier_mask=np.ones(n_all, dtype=bool),
                         posteriors=np.ones(n_all), skipped=True)

    # collapse exact duplicate source points (singular kernel system)
    _, uniq_idx, inverse = np.unique(src, axis=0, return_index=True,
                                     return_inverse=True)
    uniq_idx = np.sort(uniq_idx)
    remap = {tuple(src[i]): k for k, i in enumerate(uniq_idx)}
    rep = np.array([remap[tuple(p)] for p in src])
    dup_dropped = n_all - len(uniq_idx)
    x_raw = src[uniq_idx]
    y_raw = dst[uniq_idx]
    n = len(x_raw)
    if n < 5:
        return VfcResult(inlier_mask=np.ones(n_all, dtype=bool),
                         posteriors=np.ones(n_all), skipped=True,
                         duplicates_dropped=dup_dropped)

    # the field is fit to displacement vectors; normalize positions and
    # displacements independently to zero mean / unit scale
    disp = y_raw - x_raw
    xm, ym = x_raw.mean(axis=0), disp.mean(axis=0)
    xs = max(float(x_raw.std()), 1e-12)
    # floor the displacement scale relative to the coordinate scale so
    # numerically-constant fields don't amplify quantization jitter
    ys = max(float(disp.std()), 1e-8 * xs, 1e-12)
    x = (x_raw - xm) / xs
    y = (disp - ym) / ys

    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    gram = np.exp(-params.kernel_beta * d2)

    gamma = params.gamma_init
    a_vol = params.outlier_variance
    coeff = np.zeros((n, 2))
    fx = gram @ coeff
    sigma2 = max(float(((y - fx) ** 2).sum() / (2.0 * n)), 1e-12)
    trace: list[float] = []
    posterior = np.full(n, gamma)

    prev_obj = np.inf
    for _ in range(params.max_iter):
        # E-step
        resid2 = ((y - fx) ** 2).sum(axis=1)
        gauss = gamma * np.exp(-resid2 / (2.0 * sigma2)) / (2.0 * np.pi * sigma2)
        uniform = (1.0 - gamma) / a_vol
        posterior = gauss / (gauss + uniform + 1e-300)

        # M-step: ridge-regularized coefficient solve, then variance / gamma
        p = np.maximum(posterior, 1e-12)
        lhs = gram * p[:, None] + params.lam * sigma2 * np.eye(n)
        try:
            coeff = np.linalg.solve(lhs, p[:, None] * y)
        except np.linalg.LinAlgError as exc:
            raise RobustError(f"singular VFC kernel system: {exc}") from exc
        fx = gram @ coeff
        resid2 = ((y - fx) ** 2).sum(axis=1)
        sigma2 = max(float((p * resid2).sum() / (2.0 * p.sum())), 1e-12)
        gamma = min(max(float(p.mean()), 1e-6), 1.0 - 1e-6)

        # penalized negative log-likelihood (the EM objective)
        gauss = gamma * np.exp(-resid2 / (2.0 * sigma2)) / (2.0 * np.pi * sigma2)
        obj = float(-np.log(gauss + (1.0 - gamma) / a_vol + 1e-300).sum()
                    + 0.5 * params.lam * np.trace(coeff.T @ gram @ coeff))
        trace.append(obj)
        if abs(prev_obj - obj) < params.tol * max(abs(obj), 1.0):
            break
        prev_obj = obj

    post_all = posterior[rep]
    return VfcResult(inlier_mask=post_all > 0.5, posteriors=post_all,
                     skipped=False, duplicates_dropped=dup_dropped,
                     objective_trace=trace)
