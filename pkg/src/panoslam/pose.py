"""Spherical pose estimation from 2D-3D correspondences, plus masked
photometric pose refinement.

The solver minimizes the polar-weighted, consistency-gated tangent half-angle
reprojection error over SE(3) with damped Gauss-Newton steps on a local
(rotation vector, translation) parameterization, optionally preceded by a
minimal-sample RANSAC stage. Refinement descends a masked L1 + DSSIM
photometric loss with finite-difference gradients, since the splat renderer
is not differentiable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .se3 import PoseSE3
from .sphere import EquirectGrid, bilinear_sample, pixel_to_dir, polar_weight
from .surfels import SurfelMap, render

logger = logging.getLogger(__name__)

LAMBDA_DSSIM = 0.2


class InsufficientCorrespondences(RuntimeError):
    """Fewer usable 2D-3D correspondences than the solver's minimum."""


@dataclass(frozen=True)
class Correspondence2D3D:
    """A world point, the bearing observing it in the new frame, and its weight.

    ``weight`` carries the fixed part of the spherical balancing factor (the
    sine of the observed bearing's colatitude times the mask gate); the sine
    at the reprojected bearing depends on the pose iterate and is attached
    inside the solver.
    """

    point: np.ndarray      # (3,) world
    direction: np.ndarray  # (3,) unit bearing in the new camera
    weight: float
    source_frame: int


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 50
    tol: float = 1e-10            # convergence threshold on the update norm
    huber_scale: float = 0.02     # tangent-error units
    ransac_rounds: int = 32       # 0 disables the RANSAC pre-stage
    ransac_threshold: float = 0.008
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0 or self.huber_scale <= 0 or self.ransac_threshold <= 0:
            raise ValueError("tolerances and scales must be positive")


@dataclass
class PoseEstimate:
    pose: PoseSE3
    objective: float
    inlier_count: int
    converged: bool
    iterations: int = 0


def build_correspondences(matches_by_frame: dict[int, np.ndarray],
                          depths: list[np.ndarray], masks: list[np.ndarray],
                          poses: list[PoseSE3], grid: EquirectGrid
                          ) -> list[Correspondence2D3D]:
    """Lift pixel matches into weighted 2D-3D correspondences.

    For a match (p_k in visited frame k, p_new in the unposed frame): drop it
    when the consistency mask rejects p_k or the rendered depth there is
    invalid; otherwise back-project p_k through frame k's rendered depth and
    pose, and weight by the observed bearing's polar factor.

    Args:
        matches_by_frame: frame index -> (n, 4) array of
            (row_src, col_src, row_new, col_new).
        depths: Rendered depth per visited frame.
        masks: Consistency mask per visited frame.
        poses: Camera-to-world pose per visited frame.
        grid: Raster geometry.
    """
    corr: list[Correspondence2D3D] = []
    for k, pairs in sorted(matches_by_frame.items()):
        if k < 0 or k >= len(poses):
            raise ValueError(f"matches reference unvisited frame {k}")
        pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 4)
        if pairs.size == 0:
            continue
        rows, cols = pairs[:, 0], pairs[:, 1]
        h, w = grid.shape
        ir = np.clip(np.round(rows).astype(np.int64), 0, h - 1)
        ic = np.mod(np.round(cols).astype(np.int64), w)
        gate = masks[k][ir, ic].astype(bool)

        d, ok = bilinear_sample(depths[k], rows, cols)
        keep = gate & ok & (d > 0)
        if not np.any(keep):
            continue
        x_world = poses[k].transform(
            d[keep, None] * pixel_to_dir(rows[keep], cols[keep], grid)
        )
        obs = pixel_to_dir(pairs[keep, 2], pairs[keep, 3], grid)
        lam = polar_weight(obs)
        for xw, ob, lm in zip(x_world, np.atleast_2d(obs), np.atleast_1d(lam)):
            corr.append(Correspondence2D3D(xw, ob, float(lm), k))
    return corr


def _unpack(corr: list[Correspondence2D3D]):
    x = np.array([c.point for c in corr])
    m = np.array([c.direction for c in corr])
    lam = np.array([c.weight for c in corr])
    return x, m, lam


def _residuals(rot: np.ndarray, trans: np.ndarray, x: np.ndarray, m: np.ndarray):
    """Tangent errors plus the geometry the Jacobian needs."""
    y = (x - trans) @ rot
    dist = np.linalg.norm(y, axis=1)
    dist = np.maximum(dist, 1e-12)
    u = y / dist[:, None]
    c = np.clip(np.einsum("ij,ij->i", u, m), -1.0 + 1e-9, 1.0)
    r = 2.0 * np.sqrt(np.clip(1.0 - c, 0.0, None) / (1.0 + c))
    return r, y, u, c, dist


def _huber_weight(r: np.ndarray, delta: float) -> np.ndarray:
    w = np.ones_like(r)
    big = np.abs(r) > delta
    w[big] = delta / np.abs(r[big])
    return w


def _huber_rho(r: np.ndarray, delta: float) -> np.ndarray:
    big = np.abs(r) > delta
    out = r * r
    out[big] = 2.0 * delta * np.abs(r[big]) - delta * delta
    return out


def _objective(pose: PoseSE3, x, m, lam, huber_scale: float) -> float:
    r, _, u, _, _ = _residuals(pose.rotation_matrix(), pose.trans, x, m)
    w = lam * polar_weight(u)
    return float(np.sum(w * _huber_rho(r, huber_scale)))


def _gauss_newton(pose: PoseSE3, x, m, lam, cfg: SolverConfig,
                  max_iters: int | None = None, huber: bool = True):
    """Damped Gauss-Newton (LM) on the weighted tangent-error objective."""
    max_iters = cfg.max_iters if max_iters is None else max_iters
    scale = cfg.huber_scale
    pose_cur = pose
    r, y, u, c, dist = _residuals(pose_cur.rotation_matrix(), pose_cur.trans, x, m)
    lam_iter = lam * polar_weight(u)  # polar factor frozen within each step
    obj = float(np.sum(lam_iter * (_huber_rho(r, scale) if huber else r * r)))
    obj_prev = obj
    mu = 1e-6
    iters = 0
    converged = True  # flipped off only when iterations run out mid-descent
    for iters in range(1, max_iters + 1):
        # d(residual)/dy via the angle: dr/dtheta = 1 + (r/2)^2,
        # dtheta/dy = -(m - c u)^T / (sin(theta) * |y|).
        v = m - c[:, None] * u
        s = np.sqrt(np.clip(1.0 - c * c, 1e-24, None))
        g = -(1.0 + 0.25 * r * r) / (s * dist)
        dr_dy = g[:, None] * v
        jac = np.concatenate([np.cross(dr_dy, y), -dr_dy], axis=1)

        w_eff = lam_iter * (_huber_weight(r, scale) if huber else 1.0)
        jw = jac * w_eff[:, None]
        hess = jac.T @ jw
        grad = jw.T @ r

        accepted = False
        for _ in range(12):
            damped = hess + mu * np.diag(np.maximum(np.diag(hess), 1e-12))
            try:
                delta = np.linalg.solve(damped, -grad)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            cand = pose_cur.retract(delta)
            r_new, y_new, u_new, c_new, dist_new = _residuals(
                cand.rotation_matrix(), cand.trans, x, m
            )
            lam_new = lam * polar_weight(u_new)
            obj_new = float(np.sum(lam_new * (_huber_rho(r_new, scale) if huber
                                              else r_new * r_new)))
            if obj_new < obj:
                pose_cur, obj = cand, obj_new
                r, y, u, c, dist = r_new, y_new, u_new, c_new, dist_new
                lam_iter = lam_new
                mu = max(mu / 3.0, 1e-12)
                accepted = True
                break
            mu *= 10.0
            if mu > 1e10:
                break
        if not accepted:
            # stall: no strictly improving step exists, numerically a minimum
            break
        if np.linalg.norm(delta) < cfg.tol:
            break
        if obj_prev - obj <= 1e-6 * max(obj_prev, 1e-30):
            # plateau: IRLS reweighting churn, no meaningful progress left
            break
        obj_prev = obj
        if iters == max_iters:
            # ran out of budget while still moving materially
            converged = np.linalg.norm(delta) < 1e-3
    return pose_cur, obj, converged, iters


def _count_inliers(pose: PoseSE3, x, m, threshold: float) -> int:
    r, _, _, _, _ = _residuals(pose.rotation_matrix(), pose.trans, x, m)
    return int(np.count_nonzero(r <= threshold))


def solve_pose(corr: list[Correspondence2D3D], init: PoseSE3,
               cfg: SolverConfig = SolverConfig()) -> PoseEstimate:
    """Estimate the new frame's camera-to-world pose.

    With ``ransac_rounds > 0`` a minimal-sample consensus stage picks the
    best candidate pose first, and the robust iteration then runs on its
    consensus set; otherwise the damped Gauss-Newton starts from ``init`` on
    all correspondences. Zero-weight correspondences contribute nothing.

    Raises:
        InsufficientCorrespondences: Fewer than 4 correspondences.
    """
    if len(corr) < 4:
        raise InsufficientCorrespondences(
            f"pose solve needs >= 4 correspondences, got {len(corr)}"
        )
    x, m, lam = _unpack(corr)

    subset = (x, m, lam)
    start = init
    if cfg.ransac_rounds > 0:
        rng = np.random.default_rng(cfg.seed)
        best_pose, best_count = None, -1
        rounds_needed = cfg.ransac_rounds
        for round_idx in range(cfg.ransac_rounds):
            if round_idx >= rounds_needed:
                break
            idx = rng.choice(len(x), size=4, replace=False)
            cand, _, _, _ = _gauss_newton(init, x[idx], m[idx], lam[idx], cfg,
                                          max_iters=15, huber=False)
            count = _count_inliers(cand, x, m, cfg.ransac_threshold)
            if count > best_count:
                best_pose, best_count = cand, count
                # adaptive termination at 99.9% confidence
                ratio = max(best_count / len(x), 1e-3)
                rounds_needed = int(np.ceil(np.log(1e-3)
                                            / np.log(max(1.0 - ratio**4, 1e-12))))
        if best_pose is not None and best_count >= 4:
            r, _, _, _, _ = _residuals(best_pose.rotation_matrix(), best_pose.trans, x, m)
            sel = r <= cfg.ransac_threshold
            subset = (x[sel], m[sel], lam[sel])
            start = best_pose

    pose, obj, converged, iters = _gauss_newton(start, *subset, cfg)
    inliers = _count_inliers(pose, x, m, cfg.ransac_threshold)
    return PoseEstimate(pose=pose, objective=obj, inlier_count=inliers,
                        converged=converged, iterations=iters)


# ---------------------------------------------------------------------------
# SSIM / DSSIM
# ---------------------------------------------------------------------------


def _gaussian_window_filter(img: np.ndarray, window: int, sigma: float) -> np.ndarray:
    radius = window // 2
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = ndimage.correlate1d(img, taps, axis=0, mode="nearest")
    return ndimage.correlate1d(out, taps, axis=1, mode="wrap")


def ssim(img_a: np.ndarray, img_b: np.ndarray, window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         dynamic_range: float = 1.0) -> np.ndarray:
    """SSIM map with a Gaussian window; channels of color input are averaged.

    Raises:
        ValueError: On shape mismatch or an even/undersized window.
    """
    if img_a.shape != img_b.shape:
        raise ValueError(f"ssim shape mismatch: {img_a.shape} vs {img_b.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError("ssim window must be odd and >= 3")
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    maps = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mu_x = _gaussian_window_filter(x, window, sigma)
        mu_y = _gaussian_window_filter(y, window, sigma)
        var_x = _gaussian_window_filter(x * x, window, sigma) - mu_x**2
        var_y = _gaussian_window_filter(y * y, window, sigma) - mu_y**2
        cov = _gaussian_window_filter(x * y, window, sigma) - mu_x * mu_y
        maps.append(
            ((2 * mu_x * mu_y + c1) * (2 * cov + c2))
            / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
        )
    return np.mean(maps, axis=0)


def dssim(img_a: np.ndarray, img_b: np.ndarray, **kwargs) -> np.ndarray:
    """Structural dissimilarity map, (1 - SSIM) / 2."""
    return (1.0 - ssim(img_a, img_b, **kwargs)) / 2.0


class _SsimTarget:
    """Precomputed Gaussian-window statistics of a fixed reference image.

    The photometric refinement evaluates SSIM against the same frame hundreds
    of times; the reference side of the formula never changes.
    """

    def __init__(self, image: np.ndarray, window: int = 11, sigma: float = 1.5):
        self.image = image
        self.window = window
        self.sigma = sigma
        self.mu = [_gaussian_window_filter(image[..., ch], window, sigma)
                   for ch in range(image.shape[-1])]
        self.var = [
            _gaussian_window_filter(image[..., ch] ** 2, window, sigma) - mu**2
            for ch, mu in enumerate(self.mu)
        ]

    def ssim_map(self, img: np.ndarray, k1: float = 0.01, k2: float = 0.03,
                 dynamic_range: float = 1.0) -> np.ndarray:
        c1 = (k1 * dynamic_range) ** 2
        c2 = (k2 * dynamic_range) ** 2
        maps = []
        for ch in range(img.shape[-1]):
            x = img[..., ch]
            mu_x = _gaussian_window_filter(x, self.window, self.sigma)
            var_x = _gaussian_window_filter(x * x, self.window, self.sigma) - mu_x**2
            cov = (_gaussian_window_filter(x * self.image[..., ch], self.window,
                                           self.sigma) - mu_x * self.mu[ch])
            maps.append(
                ((2 * mu_x * self.mu[ch] + c1) * (2 * cov + c2))
                / ((mu_x**2 + self.mu[ch] ** 2 + c1) * (var_x + self.var[ch] + c2))
            )
        return np.mean(maps, axis=0)


# ---------------------------------------------------------------------------
# Photometric pose refinement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefineConfig:
    max_iters: int = 10
    fd_step: float = 1e-4
    lambda_dssim: float = LAMBDA_DSSIM
    min_coverage: float = 0.5
    # steps must beat the current loss by this relative margin; filters out
    # noise-level wandering once the pose is photometrically converged
    min_rel_improvement: float = 1e-3


@dataclass
class RefineRecord:
    frame: int
    applied: bool
    reason: str
    loss_before: float = np.nan
    loss_after: float = np.nan
    steps: int = 0


def _photometric_loss(smap: SurfelMap, pose: PoseSE3, image: np.ndarray,
                      mask: np.ndarray, grid: EquirectGrid,
                      cfg: RefineConfig, target: "_SsimTarget | None" = None):
    out = render(smap, pose, grid)
    coverage = float(np.mean(out.valid))
    region = mask & out.valid
    if not np.any(region):
        return 0.0, out, coverage
    rendered = np.where(out.valid[..., None], out.color, image)
    l1 = np.abs(rendered - image).mean(axis=-1)
    if target is None:
        target = _SsimTarget(image)
    ds = (1.0 - target.ssim_map(rendered)) / 2.0
    loss_map = (1.0 - cfg.lambda_dssim) * l1 + cfg.lambda_dssim * ds
    loss = float(loss_map[region].mean())
    return loss, out, coverage


def refine_pose_photometric(smap: SurfelMap, frames: list[np.ndarray],
                            poses: list[PoseSE3], masks: list[np.ndarray],
                            grid: EquirectGrid,
                            cfg: RefineConfig = RefineConfig(),
                            indices: list[int] | None = None):
    """Descend the masked photometric loss over each selected pose.

    Surfels stay fixed; each pose moves along finite-difference gradients of
    the masked (1-lambda)*L1 + lambda*DSSIM loss with a backtracking step,
    so the loss never increases across accepted steps. Frames whose render
    coverage is below ``cfg.min_coverage``, or whose mask has no overlap with
    the render, are skipped with a warning.

    Returns:
        (refined_poses, records): the full pose list with refined entries
        replaced, and one RefineRecord per attempted index.
    """
    refined = list(poses)
    records: list[RefineRecord] = []
    targets = range(len(poses)) if indices is None else indices
    for idx in targets:
        pose = refined[idx]
        cache = _SsimTarget(frames[idx])
        loss, _, coverage = _photometric_loss(smap, pose, frames[idx], masks[idx],
                                              grid, cfg, cache)
        if coverage < cfg.min_coverage:
            logger.warning("refine: frame %d coverage %.2f below %.2f, skipped",
                           idx, coverage, cfg.min_coverage)
            records.append(RefineRecord(idx, False, "low_coverage"))
            continue
        if not np.any(masks[idx]):
            logger.warning("refine: frame %d has an empty mask, no signal", idx)
            records.append(RefineRecord(idx, False, "no_signal"))
            continue

        rec = RefineRecord(idx, True, "ok", loss_before=loss)
        step_scale = 1e-3
        for _ in range(cfg.max_iters):
            grad = np.zeros(6)
            for j in range(6):
                e = np.zeros(6)
                e[j] = cfg.fd_step
                lp, _, _ = _photometric_loss(smap, pose.retract(e), frames[idx],
                                             masks[idx], grid, cfg, cache)
                lm, _, _ = _photometric_loss(smap, pose.retract(-e), frames[idx],
                                             masks[idx], grid, cfg, cache)
                grad[j] = (lp - lm) / (2.0 * cfg.fd_step)
            gnorm = float(np.linalg.norm(grad))
            if gnorm < 1e-12:
                break
            improved = False
            eta = step_scale / gnorm
            for _ in range(5):
                cand = pose.retract(-eta * grad)
                cand_loss, _, _ = _photometric_loss(smap, cand, frames[idx],
                                                    masks[idx], grid, cfg, cache)
                if cand_loss < loss * (1.0 - cfg.min_rel_improvement):
                    pose, loss = cand, cand_loss
                    rec.steps += 1
                    step_scale = min(step_scale * 2.0, 1e-2)
                    improved = True
                    break
                eta *= 0.25
            if not improved:
                break
        rec.loss_after = loss
        refined[idx] = pose
        records.append(rec)
    return refined, records
