"""Cross-frame depth consistency masks, monocular depth alignment, and the
NCC-based inlier test.

The core primitive is the spherical reprojection consistency check between
two depth maps: back-project a source pixel, look its footprint up in the
reference depth, back-project that, and compare where the round trip lands
against where it started, both angularly (tangent half-angle error) and
radially (relative ray-distance error). Both thresholds are inclusive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .se3 import PoseSE3
from .sphere import (
    EquirectGrid,
    all_pixel_dirs,
    bilinear_sample,
    dir_to_pixel,
    tangent_error,
    valid_depth,
)

EPS_TAN = 0.008
EPS_DEP = 0.05


class DegenerateFitError(RuntimeError):
    """Depth alignment had too little (or constant) support to fit."""


def _threshold_mask(tan_err: np.ndarray, rel_err: np.ndarray, valid: np.ndarray,
                    eps_tan: float, eps_dep: float) -> np.ndarray:
    """The consistency decision: both error terms within bounds (inclusive)."""
    return valid & (tan_err <= eps_tan) & (rel_err <= eps_dep)


# Bilinear corners farther than this (relative) from the reprojection's own
# ray distance are treated as the far side of an occlusion edge and excluded
# from the depth blend. Four times eps_dep, so depth errors the consistency
# check is meant to catch still blend in and fail; larger errors fall back to
# a plain blend, which fails the threshold as well.
_EDGE_GATE = 0.2


def _sample_ref_depth(depth_ref: np.ndarray, row, col, hypothesis):
    """Occlusion-aware bilinear depth lookup, interpolating inverse depth.

    Plain bilinear blending across a depth discontinuity manufactures ray
    distances that belong to no surface; gating the corners against the
    reprojected point's own distance keeps the lookup on one side of the
    edge. When every corner is gated (the hypothesis matches no surface),
    all valid corners blend so the inconsistency surfaces downstream. The
    blend itself runs on 1/depth, which is linear in the bearing for planar
    surfaces and therefore accurate at grazing incidence.
    """
    h, w = depth_ref.shape
    r = np.clip(row, 0.0, h - 1.0)
    r0 = np.floor(r).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    fr = r - r0
    c = np.mod(col, w)
    cf = np.floor(c)
    fc = c - cf
    c0 = np.mod(cf, w).astype(np.int64)
    c1 = np.mod(c0 + 1, w)

    vals = np.stack(
        [depth_ref[r0, c0], depth_ref[r0, c1], depth_ref[r1, c0], depth_ref[r1, c1]]
    )
    wgts = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
    usable = np.isfinite(vals) & (vals > 0)
    near = usable & (np.abs(vals - hypothesis) <= _EDGE_GATE * np.abs(hypothesis))

    keep = np.where(np.any(near, axis=0), near, usable)
    wk = np.where(keep, wgts, 0.0)
    norm = wk.sum(axis=0)
    ok = np.all(usable | (wgts == 0.0), axis=0) | np.any(near, axis=0)
    ok &= norm > 1e-12
    inv = np.where(keep, 1.0 / np.where(keep, vals, 1.0), 0.0)
    inv_blend = (inv * wk).sum(axis=0) / np.maximum(norm, 1e-12)
    sample = np.where(ok & (inv_blend > 1e-12), 1.0 / np.maximum(inv_blend, 1e-12), 1.0)
    ok &= inv_blend > 1e-12
    return sample, ok


def consistency_errors(depth_src: np.ndarray, pose_src: PoseSE3,
                       depth_ref: np.ndarray, pose_ref: PoseSE3,
                       grid: EquirectGrid):
    """Per-pixel reprojection error terms of the source frame vs a reference.

    Returns:
        (tan_err, rel_err, valid): the tangent angular error between each
        source ray and its round-trip reprojection, the relative ray-distance
        error, and where the round trip stayed on valid depth.
    """
    if depth_src.shape != grid.shape or depth_ref.shape != grid.shape:
        raise ValueError("depth maps must match the grid")
    dirs = all_pixel_dirs(grid)
    ok_src = valid_depth(depth_src)
    d_src = np.where(ok_src, depth_src, 1.0)

    x_world = pose_src.transform(dirs * d_src[..., None])
    y_ref = pose_ref.inverse().transform(x_world)
    dist_ref = np.linalg.norm(y_ref, axis=-1)
    safe = dist_ref > 1e-12
    u_ref = y_ref / np.maximum(dist_ref, 1e-12)[..., None]
    row_j, col_j, _ = dir_to_pixel(np.where(safe[..., None], u_ref, [1.0, 0, 0]), grid)

    d_ref, samp_ok = _sample_ref_depth(depth_ref, row_j, col_j, dist_ref)
    d_ref = np.where(samp_ok, d_ref, 1.0)

    x_ref_world = pose_ref.transform(u_ref * d_ref[..., None])
    x_back = pose_src.inverse().transform(x_ref_world)
    dist_back = np.linalg.norm(x_back, axis=-1)
    back_safe = dist_back > 1e-12
    u_back = x_back / np.maximum(dist_back, 1e-12)[..., None]

    tan_err = tangent_error(dirs, u_back)
    rel_err = np.abs(d_src - dist_back) / d_src
    valid = ok_src & samp_ok & safe & back_safe & (d_ref > 0)
    return tan_err, rel_err, valid


def pairwise_consistency(depth_src: np.ndarray, pose_src: PoseSE3,
                         depth_ref: np.ndarray, pose_ref: PoseSE3,
                         grid: EquirectGrid, eps_tan: float = EPS_TAN,
                         eps_dep: float = EPS_DEP) -> np.ndarray:
    """Spherical reprojection consistency mask of src against ref.

    1 where the source pixel's depth agrees with the reference depth map both
    angularly (<= eps_tan) and radially (<= eps_dep relative); 0 where either
    depth is invalid or the projection leaves valid reference coverage.
    """
    tan_err, rel_err, valid = consistency_errors(
        depth_src, pose_src, depth_ref, pose_ref, grid
    )
    return _threshold_mask(tan_err, rel_err, valid, eps_tan, eps_dep)


def cross_frame_mask(k: int, t: int, depths: list[np.ndarray],
                     poses: list[PoseSE3], grid: EquirectGrid,
                     eps_tan: float = EPS_TAN, eps_dep: float = EPS_DEP) -> np.ndarray:
    """Consistency of frame k against both the latest frame t and frame k-1.

    The product couples local (adjacent-frame) and global (against the newest
    view) agreement. For k = 0 the adjacent factor is all ones.
    """
    if t <= k:
        raise ValueError(f"cross_frame_mask requires k < t, got k={k}, t={t}")
    mask = pairwise_consistency(depths[k], poses[k], depths[t], poses[t], grid,
                                eps_tan, eps_dep)
    if k > 0:
        mask = mask & pairwise_consistency(depths[k], poses[k], depths[k - 1],
                                           poses[k - 1], grid, eps_tan, eps_dep)
    return mask


def adjacent_mask(k: int, depths: list[np.ndarray], poses: list[PoseSE3],
                  grid: EquirectGrid, eps_tan: float = EPS_TAN,
                  eps_dep: float = EPS_DEP) -> np.ndarray:
    """Product of consistency against both temporal neighbors.

    Boundary frames use their single available neighbor; a lone frame gets
    its valid-depth mask (no constraint to apply).
    """
    factors = []
    for nbr in (k - 1, k + 1):
        if 0 <= nbr < len(depths):
            factors.append(pairwise_consistency(depths[k], poses[k], depths[nbr],
                                                poses[nbr], grid, eps_tan, eps_dep))
    if not factors:
        return valid_depth(depths[k])
    mask = factors[0]
    for f in factors[1:]:
        mask = mask & f
    return mask


def inconsistency_mask(m_con: np.ndarray, depth_rendered: np.ndarray) -> np.ndarray:
    """Complement of the consistency mask over pixels with valid rendered depth."""
    return valid_depth(depth_rendered) & ~m_con


@dataclass(frozen=True)
class AffineDepthFit:
    """Least-squares scale/shift mapping monocular depth onto rendered depth."""

    scale: float
    shift: float
    residual_rms: float
    support: int


def align_depth(depth_mono: np.ndarray, depth_ref: np.ndarray,
                mask: np.ndarray):
    """Fit depth_ref ~= scale*depth_mono + shift over masked valid pixels.

    Closed-form normal equations on the masked support. The aligned map is
    produced for every valid monocular pixel; nonpositive aligned values are
    marked invalid (+inf) since they cannot back-project.

    Returns:
        (AffineDepthFit, aligned_depth)

    Raises:
        DegenerateFitError: Fewer than 2 support pixels, or constant
            monocular depth on the support.
    """
    # monocular values may be negative under affine corruption; only
    # non-finite marks a missing measurement
    support = mask & np.isfinite(depth_mono) & valid_depth(depth_ref)
    n = int(np.count_nonzero(support))
    if n < 2:
        raise DegenerateFitError(f"affine depth fit needs >= 2 support pixels, got {n}")
    m = depth_mono[support]
    r = depth_ref[support]
    m_mean = m.mean()
    r_mean = r.mean()
    var = np.mean((m - m_mean) ** 2)
    if var < 1e-18:
        raise DegenerateFitError(
            f"constant monocular depth on support (n={n}, value~{m_mean:.4g})"
        )
    scale = float(np.mean((m - m_mean) * (r - r_mean)) / var)
    shift = float(r_mean - scale * m_mean)
    rms = float(np.sqrt(np.mean((scale * m + shift - r) ** 2)))

    aligned = np.where(np.isfinite(depth_mono), scale * depth_mono + shift, np.inf)
    aligned = np.where(aligned > 0, aligned, np.inf)
    return AffineDepthFit(scale, shift, rms, n), aligned


def warp_image(img_ref: np.ndarray, depth_src: np.ndarray, pose_src: PoseSE3,
               pose_ref: PoseSE3, grid: EquirectGrid):
    """Warp a reference image into the source view through the source depth.

    Each source pixel back-projects through depth_src, lands in the reference
    camera, and samples img_ref bilinearly there.

    Returns:
        (warped, valid) with warped zeros where invalid.
    """
    dirs = all_pixel_dirs(grid)
    ok = valid_depth(depth_src)
    d = np.where(ok, depth_src, 1.0)
    x_world = pose_src.transform(dirs * d[..., None])
    y_ref = pose_ref.inverse().transform(x_world)
    dist = np.linalg.norm(y_ref, axis=-1)
    safe = dist > 1e-12
    u = y_ref / np.maximum(dist, 1e-12)[..., None]
    row, col, _ = dir_to_pixel(np.where(safe[..., None], u, [1.0, 0, 0]), grid)
    warped, samp_ok = bilinear_sample(img_ref, row, col)
    valid = ok & safe & samp_ok
    warped = np.where(valid[..., None] if warped.ndim == 3 else valid, warped, 0.0)
    return warped, valid


def _to_gray(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=-1) if img.ndim == 3 else img


def ncc_map(a: np.ndarray, b: np.ndarray, patch: int) -> np.ndarray:
    """Per-pixel normalized cross correlation over patch x patch windows.

    Zero-variance windows score -1 so they can never win a comparison.
    Windows wrap horizontally (panorama seam) and clamp vertically.
    """
    mode = ("nearest", "wrap")
    mean = lambda x: ndimage.uniform_filter(x, size=patch, mode=mode)
    mu_a, mu_b = mean(a), mean(b)
    var_a = np.clip(mean(a * a) - mu_a**2, 0.0, None)
    var_b = np.clip(mean(b * b) - mu_b**2, 0.0, None)
    cov = mean(a * b) - mu_a * mu_b
    denom = np.sqrt(var_a * var_b)
    degenerate = (var_a < 1e-12) | (var_b < 1e-12)
    with np.errstate(invalid="ignore", divide="ignore"):
        score = cov / denom
    return np.where(degenerate, -1.0, np.clip(score, -1.0, 1.0))


def ncc_mask(img_k: np.ndarray, img_prev: np.ndarray, depth_aligned: np.ndarray,
             depth_rendered: np.ndarray, pose_k: PoseSE3, pose_prev: PoseSE3,
             grid: EquirectGrid, patch: int = 7) -> np.ndarray:
    """Pixels where the aligned monocular depth explains the photometry
    strictly better than the rendered depth.

    The previous frame is warped into frame k twice, once per depth
    hypothesis, and patchwise NCC against frame k decides the winner. Pixels
    where either warp is invalid (or whose patch straddles invalid warp
    samples) are 0.
    """
    if patch < 3 or patch % 2 == 0:
        raise ValueError(f"NCC patch must be odd and >= 3, got {patch}")
    warp_a, ok_a = warp_image(img_prev, depth_aligned, pose_k, pose_prev, grid)
    warp_r, ok_r = warp_image(img_prev, depth_rendered, pose_k, pose_prev, grid)

    gray_k = _to_gray(img_k)
    score_a = ncc_map(gray_k, _to_gray(warp_a), patch)
    score_r = ncc_map(gray_k, _to_gray(warp_r), patch)

    mode = ("nearest", "wrap")
    full_a = ndimage.uniform_filter(ok_a.astype(np.float64), patch, mode=mode) > 1 - 1e-9
    full_r = ndimage.uniform_filter(ok_r.astype(np.float64), patch, mode=mode) > 1 - 1e-9
    return (score_a > score_r) & ok_a & ok_r & full_a & full_r


def inlier_mask(m_inc: np.ndarray, m_con_aligned: np.ndarray,
                m_ncc: np.ndarray) -> np.ndarray:
    """Candidate pixels whose aligned depth should be merged into the map."""
    if not (m_inc.shape == m_con_aligned.shape == m_ncc.shape):
        raise ValueError("inlier_mask factors must share one grid")
    return m_inc & m_con_aligned & m_ncc
