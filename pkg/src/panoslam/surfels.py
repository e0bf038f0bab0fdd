"""Surfel map: point primitives with weighted z-buffer panorama rendering.

The map is the scene representation the whole pipeline reads from and writes
to. Rendering splats every surfel onto the disk of pixels covered by its
projected angular radius; per pixel the splat nearest in depth wins, carrying
a Gaussian falloff weight. Per-surfel accumulators average binary mask values
over the pixels each surfel wins, which drives pruning and opacity resets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .se3 import PoseSE3
from .sphere import EquirectGrid, all_pixel_dirs, valid_depth

INITIAL_OPACITY = 1.0
PRUNE_THRESHOLD = 0.8
RESET_THRESHOLD = 0.8

# Disk half-extent relative to the pixel block a surfel stands in for; >0.5
# leaves overlap so stride-subsampled maps render without holes.
RADIUS_FACTOR = 0.75

# Splats within this relative depth band of the per-pixel winner blend into
# the output color (soft z-buffer). Keeps the rendered image continuous in
# the pose, which finite-difference photometric refinement relies on; the
# winner/depth/weight outputs stay strict z-buffer.
COLOR_DEPTH_BAND = 0.05

_CHANNELS = ("inlier", "inconsistent")


@dataclass
class RenderOutput:
    """Result of splatting a map into an equirectangular view."""

    color: np.ndarray    # (H, W, 3)
    depth: np.ndarray    # (H, W), +inf where nothing rendered
    winner: np.ndarray   # (H, W) int32 surfel index, -1 where empty
    weight: np.ndarray   # (H, W) winning splat weight, 0 where empty

    @property
    def valid(self) -> np.ndarray:
        return self.winner >= 0

    def invalid_fraction(self) -> float:
        return float(np.mean(self.winner < 0))


class SurfelMap:
    """Struct-of-arrays surfel container with mask accumulators."""

    def __init__(self):
        self.positions = np.zeros((0, 3))
        self.radii = np.zeros(0)
        self.colors = np.zeros((0, 3))
        self.opacities = np.zeros(0)
        self.source = np.zeros(0, dtype=np.int32)
        self._wsum = {c: np.zeros(0) for c in _CHANNELS}
        self._msum = {c: np.zeros(0) for c in _CHANNELS}

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def from_arrays(cls, positions, radii, colors, opacities,
                    source_frame: int = 0) -> "SurfelMap":
        """Build a map from parallel arrays (e.g. a loaded PLY snapshot)."""
        smap = cls()
        smap._append(
            np.asarray(positions, dtype=np.float64).reshape(-1, 3),
            np.asarray(radii, dtype=np.float64).reshape(-1),
            np.asarray(colors, dtype=np.float64).reshape(-1, 3),
            np.asarray(opacities, dtype=np.float64).reshape(-1),
            source_frame,
        )
        return smap

    def _append(self, positions, radii, colors, opacities, source_frame: int):
        n = len(positions)
        self.positions = np.concatenate([self.positions, positions], axis=0)
        self.radii = np.concatenate([self.radii, radii])
        self.colors = np.concatenate([self.colors, colors], axis=0)
        self.opacities = np.concatenate([self.opacities, opacities])
        self.source = np.concatenate(
            [self.source, np.full(n, source_frame, dtype=np.int32)]
        )
        for c in _CHANNELS:
            self._wsum[c] = np.concatenate([self._wsum[c], np.zeros(n)])
            self._msum[c] = np.concatenate([self._msum[c], np.zeros(n)])

    def accumulated(self, channel: str):
        """(A, defined) for one channel; A is 0 where no weight accumulated."""
        if channel not in _CHANNELS:
            raise ValueError(f"unknown channel {channel!r}")
        wsum = self._wsum[channel]
        defined = wsum > 0
        a = np.zeros(len(self))
        a[defined] = self._msum[channel][defined] / wsum[defined]
        return a, defined

    def clear_accumulators(self) -> None:
        for c in _CHANNELS:
            self._wsum[c][:] = 0.0
            self._msum[c][:] = 0.0


def init_from_depth(color: np.ndarray, depth: np.ndarray, grid: EquirectGrid,
                    stride: int = 2) -> SurfelMap:
    """Seed a map from one panorama pair, one surfel per stride-th valid pixel.

    Positions back-project through the depth map (camera at the origin, world
    frame = camera frame of this first view); the radius covers the stride
    block's angular footprint at the surfel's depth.

    Raises:
        ValueError: If the depth map contains no valid pixel.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ok = valid_depth(depth)
    rows = np.arange(0, grid.height, stride)
    cols = np.arange(0, grid.width, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    sel = ok[rr, cc]
    if not np.any(ok):
        raise ValueError("cannot initialize map from all-invalid depth")
    rr, cc = rr[sel], cc[sel]

    d = depth[rr, cc]
    dirs = all_pixel_dirs(grid)[rr, cc]
    smap = SurfelMap()
    smap._append(
        positions=dirs * d[:, None],
        radii=RADIUS_FACTOR * stride * grid.pixel_angle * d,
        colors=color[rr, cc],
        opacities=np.full(rr.size, INITIAL_OPACITY),
        source_frame=0,
    )
    return smap


def render(smap: SurfelMap, pose: PoseSE3, grid: EquirectGrid) -> RenderOutput:
    """Weighted z-buffer splatting of the map into a camera view.

    Each surfel covers the pixel disk within its projected angular radius
    ``alpha = arcsin(radius / distance)``; the nearest-depth splat wins each
    pixel with weight ``opacity * exp(-d^2 / (2*sigma^2))``, ``sigma = alpha/2``
    and ``d`` the pixel's angular offset from the splat center. Deterministic:
    exact depth ties resolve to the lower surfel index.
    """
    h, w = grid.shape
    out = RenderOutput(
        color=np.zeros((h, w, 3)),
        depth=np.full((h, w), np.inf),
        winner=np.full((h, w), -1, dtype=np.int32),
        weight=np.zeros((h, w)),
    )
    if len(smap) == 0:
        return out

    rot = pose.rotation_matrix()
    y = (smap.positions - pose.trans) @ rot
    dist = np.linalg.norm(y, axis=1)
    near = dist > 1e-9
    u = y[near] / dist[near, None]
    dist_n = dist[near]
    sid = np.flatnonzero(near)

    alpha = np.arcsin(np.clip(smap.radii[sid] / dist_n, 0.0, 1.0))
    alpha = np.clip(alpha, 1e-9, np.pi / 4)
    delta = grid.pixel_angle
    theta = np.arccos(np.clip(u[:, 2], -1.0, 1.0))
    row_c = np.clip(np.round(theta / delta - 0.5).astype(np.int64), 0, h - 1)
    phi = np.arctan2(u[:, 1], u[:, 0])
    col_c = np.mod(np.round((phi + np.pi) / delta - 0.5).astype(np.int64), w)

    hr = np.ceil(alpha / delta).astype(np.int64)
    # Column reach accounts for meridian convergence within the row band.
    band_lo = np.maximum(theta - alpha, 0.0)
    band_hi = np.minimum(theta + alpha, np.pi)
    sin_min = np.minimum(np.sin(band_lo), np.sin(band_hi))
    crosses_pole = (theta - alpha <= 0.0) | (theta + alpha >= np.pi)
    with np.errstate(divide="ignore"):
        hw = np.ceil(alpha / (delta * np.maximum(sin_min, 1e-9))).astype(np.int64)
    hw = np.where(crosses_pole, w // 2, np.minimum(hw, w // 2))

    bw = 2 * hw + 1
    counts = (2 * hr + 1) * bw
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(sid)), counts)
    offset = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    dy = offset // bw[owner] - hr[owner]
    dx = offset % bw[owner] - hw[owner]

    rows = row_c[owner] + dy
    cols = np.mod(col_c[owner] + dx, w)
    inside = (rows >= 0) & (rows < h)
    owner, rows, cols = owner[inside], rows[inside], cols[inside]

    lut = all_pixel_dirs(grid)
    dots = np.einsum("ij,ij->i", lut[rows, cols], u[owner])
    ang = np.arccos(np.clip(dots, -1.0, 1.0))
    covered = ang <= alpha[owner]
    owner, rows, cols, ang = owner[covered], rows[covered], cols[covered], ang[covered]
    if owner.size == 0:
        return out

    sigma = alpha[owner] * 0.5
    weights = smap.opacities[sid[owner]] * np.exp(-0.5 * (ang / sigma) ** 2)
    pix = rows * w + cols
    depth_cand = dist_n[owner]

    order = np.lexsort((sid[owner], depth_cand, pix))
    pix_sorted = pix[order]
    seg_starts = np.flatnonzero(np.r_[True, pix_sorted[1:] != pix_sorted[:-1]])
    win = order[seg_starts]

    prow, pcol = pix[win] // w, pix[win] % w
    sel = sid[owner[win]]
    out.depth[prow, pcol] = depth_cand[win]
    out.winner[prow, pcol] = sel
    out.weight[prow, pcol] = weights[win]

    # Soft z-buffer color: blend every splat within the winner's depth band.
    seg_len = np.diff(np.r_[seg_starts, pix_sorted.size])
    win_depth_sorted = np.repeat(depth_cand[win], seg_len)
    depth_sorted = depth_cand[order]
    w_sorted = np.where(
        depth_sorted <= win_depth_sorted * (1.0 + COLOR_DEPTH_BAND),
        weights[order], 0.0,
    )
    c_sorted = smap.colors[sid[owner[order]]] * w_sorted[:, None]
    wsum = np.add.reduceat(w_sorted, seg_starts)
    csum = np.add.reduceat(c_sorted, seg_starts, axis=0)
    out.color[prow, pcol] = csum / wsum[:, None]
    return out


def accumulate_mask(smap: SurfelMap, out: RenderOutput, mask: np.ndarray,
                    channel: str) -> None:
    """Fold one frame's binary mask into per-surfel weighted averages.

    For every pixel a surfel wins, (weight, weight*mask) joins its running
    sums; the accumulated value is the weighted mean over all folded frames.
    ``out`` must have been rendered from ``smap`` in its current state.
    """
    if channel not in _CHANNELS:
        raise ValueError(f"unknown channel {channel!r}")
    if mask.shape != out.winner.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match render {out.winner.shape}"
        )
    covered = out.winner >= 0
    idx = out.winner[covered].astype(np.int64)
    if idx.size and idx.max() >= len(smap):
        raise ValueError("render output references surfels missing from the map")
    wgt = out.weight[covered]
    mval = mask[covered].astype(np.float64)
    np.add.at(smap._wsum[channel], idx, wgt)
    np.add.at(smap._msum[channel], idx, wgt * mval)


def prune_and_reset(smap: SurfelMap, prune_threshold: float = PRUNE_THRESHOLD,
                    reset_threshold: float = RESET_THRESHOLD) -> tuple[int, int]:
    """Drop superseded surfels and restore doubtful ones to full opacity.

    Surfels whose inlier accumulator exceeds the prune threshold are removed
    (their pixels are now explained by merged depth inliers); of the rest,
    those whose inconsistency accumulator exceeds the reset threshold get
    their opacity restored to the insertion value. Accumulators are cleared
    afterwards so the next cycle starts fresh. Surfels with no accumulated
    weight are left untouched.
    """
    a_inl, def_inl = smap.accumulated("inlier")
    a_inc, def_inc = smap.accumulated("inconsistent")
    prune = def_inl & (a_inl > prune_threshold)
    reset = ~prune & def_inc & (a_inc > reset_threshold)

    n_reset = int(np.count_nonzero(reset))
    smap.opacities[reset] = INITIAL_OPACITY

    n_prune = int(np.count_nonzero(prune))
    if n_prune:
        keep = ~prune
        smap.positions = smap.positions[keep]
        smap.radii = smap.radii[keep]
        smap.colors = smap.colors[keep]
        smap.opacities = smap.opacities[keep]
        smap.source = smap.source[keep]
        for c in _CHANNELS:
            smap._wsum[c] = smap._wsum[c][keep]
            smap._msum[c] = smap._msum[c][keep]
    smap.clear_accumulators()
    return n_prune, n_reset


def merge_points(smap: SurfelMap, points: np.ndarray, colors: np.ndarray,
                 source_frame: int, spacing: np.ndarray | None = None) -> None:
    """Append verified depth points as new surfels (opacity 1).

    Radii derive from the local point spacing: the in-batch nearest-neighbor
    distance, tightened by the caller's per-point sampling spacing when known
    (for pixel-grid samples that is the pixel footprint at the point's
    depth). Without a spacing hint, isolated points fall back to the map's
    median radius rather than splatting arbitrarily large disks.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return
    if not np.all(np.isfinite(points)):
        raise ValueError("merge_points requires finite coordinates")
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)

    ref = np.median(smap.radii) if len(smap) else 0.01
    if points.shape[0] >= 2:
        nn = cKDTree(points).query(points, k=2)[0][:, 1]
        radii = np.clip(0.75 * nn, 1e-6, 4.0 * ref)
        radii[nn <= 0] = ref
    else:
        radii = np.full(points.shape[0], ref)
    if spacing is not None:
        radii = np.minimum(radii, 0.75 * np.asarray(spacing, dtype=np.float64))

    smap._append(points, radii, colors, np.full(points.shape[0], INITIAL_OPACITY),
                 source_frame)


def update_colors(smap: SurfelMap, frames: list[np.ndarray],
                  poses: list[PoseSE3], grid: EquirectGrid) -> None:
    """Set each surfel's color to the weight-averaged pixel colors it wins."""
    if len(smap) == 0:
        return
    csum = np.zeros((len(smap), 3))
    wsum = np.zeros(len(smap))
    for img, pose in zip(frames, poses):
        out = render(smap, pose, grid)
        covered = out.winner >= 0
        idx = out.winner[covered].astype(np.int64)
        wgt = out.weight[covered]
        np.add.at(csum, idx, wgt[:, None] * img[covered])
        np.add.at(wsum, idx, wgt)
    seen = wsum > 0
    smap.colors[seen] = csum[seen] / wsum[seen, None]
