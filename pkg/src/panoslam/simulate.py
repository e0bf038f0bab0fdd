"""Ground-truth oracle: procedural scenes, panoramic ray casting, trajectories,
monocular-depth corruption, and noisy feature-match injection.

Everything here is deterministic for a fixed seed, so tests can re-derive any
value the pipeline consumes. Rendered depth is Euclidean ray distance (not
planar z), the quantity the geometric consistency checks compare.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io as pio
from .se3 import PoseSE3
from .sphere import EquirectGrid, all_pixel_dirs, dir_to_pixel, pixel_to_dir, valid_depth

SKY_DEPTH = np.inf


class ConfigError(ValueError):
    """Unknown preset or invalid simulator configuration."""


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticScene:
    """Triangle soup with per-triangle procedural texture parameters."""

    vertices: np.ndarray        # (T, 3, 3)
    base_color: np.ndarray      # (T, 3) in [0, 1]
    checker_scale: np.ndarray   # (T,) world units per checker cell
    noise_amp: np.ndarray       # (T,) fine value-noise amplitude
    texture_seed: int
    bounding_diameter: float
    sky_color: np.ndarray | None = None  # None => scene is closed

    @property
    def n_triangles(self) -> int:
        return self.vertices.shape[0]


def _box_triangles(center, half) -> np.ndarray:
    cx, cy, cz = center
    hx, hy, hz = half
    lo = np.array([cx - hx, cy - hy, cz - hz])
    hi = np.array([cx + hx, cy + hy, cz + hz])
    c = np.array(
        [
            [lo[0], lo[1], lo[2]],
            [hi[0], lo[1], lo[2]],
            [hi[0], hi[1], lo[2]],
            [lo[0], hi[1], lo[2]],
            [lo[0], lo[1], hi[2]],
            [hi[0], lo[1], hi[2]],
            [hi[0], hi[1], hi[2]],
            [lo[0], hi[1], hi[2]],
        ]
    )
    quads = [
        (0, 1, 2, 3),  # floor
        (4, 5, 6, 7),  # ceiling
        (0, 1, 5, 4),  # y-
        (2, 3, 7, 6),  # y+
        (0, 3, 7, 4),  # x-
        (1, 2, 6, 5),  # x+
    ]
    tris = []
    for a, b, cc, d in quads:
        tris.append([c[a], c[b], c[cc]])
        tris.append([c[a], c[cc], c[d]])
    return np.asarray(tris, dtype=np.float64)


def _quad_triangles(p0, p1, p2, p3) -> np.ndarray:
    return np.asarray([[p0, p1, p2], [p0, p2, p3]], dtype=np.float64)


def generate_scene(preset: str, seed: int = 0) -> SyntheticScene:
    """Build a deterministic textured scene.

    ``room`` fully encloses origin-centered trajectories; ``courtyard`` is
    open upward, so sky rays miss and render invalid depth.
    """
    rng = np.random.default_rng(seed)
    groups = []  # (tris, base_color, checker_scale, noise_amp)

    def add(tris, color, cell, amp):
        groups.append((tris, np.asarray(color, dtype=np.float64), cell, amp))

    if preset == "room":
        shell = _box_triangles((0.0, 0.0, 0.0), (3.0, 3.0, 2.0))
        # Split shell faces into separate texture groups for color contrast.
        palette = rng.uniform(0.35, 0.9, size=(6, 3))
        for face in range(6):
            add(shell[2 * face : 2 * face + 2], palette[face], rng.uniform(1.0, 1.5), 0.05)
        for _ in range(3):
            ang = rng.uniform(0.0, 2.0 * np.pi)
            rad = rng.uniform(1.4, 2.2)
            center = (rad * np.cos(ang), rad * np.sin(ang), rng.uniform(-1.0, 0.4))
            half = rng.uniform(0.25, 0.55, size=3)
            add(_box_triangles(center, half), rng.uniform(0.3, 0.9, size=3),
                rng.uniform(0.45, 0.65), 0.05)
        diameter = 2.0 * np.sqrt(3.0**2 + 3.0**2 + 2.0**2)
        sky = None
    elif preset == "courtyard":
        ext, zlo, zhi = 8.0, -1.5, 2.0
        add(_quad_triangles(
            (-ext, -ext, zlo), (ext, -ext, zlo), (ext, ext, zlo), (-ext, ext, zlo)),
            rng.uniform(0.4, 0.8, size=3), 1.0, 0.06)
        # Three walls; +y side stays open to the sky beyond the ground square.
        walls = [
            ((-ext, -ext, zlo), (ext, -ext, zlo), (ext, -ext, zhi), (-ext, -ext, zhi)),
            ((-ext, -ext, zlo), (-ext, ext, zlo), (-ext, ext, zhi), (-ext, -ext, zhi)),
            ((ext, -ext, zlo), (ext, ext, zlo), (ext, ext, zhi), (ext, -ext, zhi)),
        ]
        for quad in walls:
            add(_quad_triangles(*quad), rng.uniform(0.4, 0.85, size=3),
                rng.uniform(0.8, 1.2), 0.06)
        for _ in range(2):
            ang = rng.uniform(0.0, 2.0 * np.pi)
            rad = rng.uniform(2.0, 3.5)
            center = (rad * np.cos(ang), rad * np.sin(ang), zlo + rng.uniform(0.4, 0.9))
            add(_box_triangles(center, rng.uniform(0.3, 0.7, size=3)),
                rng.uniform(0.3, 0.9, size=3), rng.uniform(0.3, 0.5), 0.06)
        diameter = 2.0 * np.sqrt(ext**2 + ext**2 + ((zhi - zlo) / 2.0) ** 2)
        sky = np.array([0.55, 0.70, 0.90])
    else:
        raise ConfigError(f"unknown scene preset {preset!r}")

    vertices = np.concatenate([g[0] for g in groups], axis=0)
    base = np.concatenate([np.tile(g[1], (len(g[0]), 1)) for g in groups], axis=0)
    cell = np.concatenate([np.full(len(g[0]), g[2]) for g in groups])
    amp = np.concatenate([np.full(len(g[0]), g[3]) for g in groups])
    return SyntheticScene(
        vertices=vertices,
        base_color=base,
        checker_scale=cell,
        noise_amp=amp,
        texture_seed=int(rng.integers(0, 2**31 - 1)),
        bounding_diameter=float(diameter),
        sky_color=sky,
    )


# ---------------------------------------------------------------------------
# Procedural texture
# ---------------------------------------------------------------------------


def _hash01(ix, iy, iz, seed: int) -> np.ndarray:
    """Deterministic lattice hash -> floats in [0, 1)."""
    seed_mix = np.uint64((seed * 0x27D4EB2F165667C5) & 0xFFFFFFFFFFFFFFFF)
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
        ^ seed_mix
    )
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(29)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points: np.ndarray, seed: int, scale: float = 0.35) -> np.ndarray:
    """Smooth seeded 3D value noise in [0, 1], trilinear with smoothstep."""
    p = np.asarray(points, dtype=np.float64) / scale
    i = np.floor(p)
    f = p - i
    f = f * f * (3.0 - 2.0 * f)
    i = i.astype(np.int64)
    out = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = _hash01(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz, seed)
                w = (
                    (f[..., 0] if dx else 1 - f[..., 0])
                    * (f[..., 1] if dy else 1 - f[..., 1])
                    * (f[..., 2] if dz else 1 - f[..., 2])
                )
                out += corner * w
    return out


def _soft_checker(points: np.ndarray, cell) -> np.ndarray:
    """Anti-aliased 3D checkerboard in [-1, 1]."""
    u = np.asarray(points) * (np.pi / np.asarray(cell)[..., None])
    w = np.tanh(1.6 * np.sin(u))
    return w[..., 0] * w[..., 1] * w[..., 2]


def scene_color(scene: SyntheticScene, tri_idx: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate the procedural texture at world-space surface points."""
    base = scene.base_color[tri_idx]
    cell = scene.checker_scale[tri_idx]
    amp = scene.noise_amp[tri_idx]
    pattern = 0.80 + 0.20 * (0.5 + 0.5 * _soft_checker(points, cell))
    noise = value_noise(points, scene.texture_seed)
    color = base * pattern[..., None] + (amp * (noise - 0.5))[..., None]
    return np.clip(color, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Panoramic ray casting
# ---------------------------------------------------------------------------


def raycast_pano(scene: SyntheticScene, pose: PoseSE3, grid: EquirectGrid,
                 chunk: int = 4096):
    """Render (color, depth) panoramas by first-hit ray casting.

    Depth is the Euclidean distance from the camera center to the hit point;
    +inf where no triangle is hit (open-sky presets).
    """
    h, w = grid.shape
    dirs = all_pixel_dirs(grid).reshape(-1, 3) @ pose.rotation_matrix().T
    origin = pose.trans

    v0 = scene.vertices[:, 0]
    e1 = scene.vertices[:, 1] - v0
    e2 = scene.vertices[:, 2] - v0
    tvec = origin - v0                      # constant per render
    qvec = np.cross(tvec, e1)
    e2_dot_q = np.einsum("ij,ij->i", e2, qvec)

    depth = np.full(h * w, SKY_DEPTH)
    tri_hit = np.full(h * w, -1, dtype=np.int64)
    eps = 1e-12
    for s in range(0, h * w, chunk):
        d = dirs[s : s + chunk]
        pvec = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("ntk,tk->nt", pvec, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_det = 1.0 / det
            u = np.einsum("ntk,tk->nt", pvec, tvec) * inv_det
            v = np.einsum("nk,tk->nt", d, qvec) * inv_det
            t_hit = e2_dot_q[None, :] * inv_det
        ok = (
            (np.abs(det) > eps)
            & (u >= -1e-9)
            & (v >= -1e-9)
            & (u + v <= 1.0 + 1e-9)
            & (t_hit > 1e-9)
        )
        t_hit = np.where(ok, t_hit, np.inf)
        best = np.argmin(t_hit, axis=1)
        rows = np.arange(len(d))
        best_t = t_hit[rows, best]
        hit = np.isfinite(best_t)
        depth[s : s + chunk] = best_t
        tri_hit[s : s + chunk] = np.where(hit, best, -1)

    color = np.zeros((h * w, 3))
    hit = tri_hit >= 0
    if np.any(hit):
        pts = origin + dirs[hit] * depth[hit, None]
        color[hit] = scene_color(scene, tri_hit[hit], pts)
    if scene.sky_color is not None:
        color[~hit] = scene.sky_color
    return color.reshape(h, w, 3), depth.reshape(h, w)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

TRAJECTORY_MODES = ("egocentric-orbit", "non-egocentric-sweep")


@dataclass(frozen=True)
class TrajectorySpec:
    mode: str = "egocentric-orbit"
    frames: int = 12
    step: float = 0.08          # translation between consecutive frames
    rot_per_frame: float = 0.05  # yaw increment, radians
    seed: int = 0

    def __post_init__(self):
        if self.mode not in TRAJECTORY_MODES:
            raise ConfigError(f"unknown trajectory mode {self.mode!r}")
        if self.frames < 1:
            raise ConfigError("frame count must be >= 1")
        if self.step < 0:
            raise ConfigError("step size must be >= 0")


def generate_trajectory(spec: TrajectorySpec) -> list[PoseSE3]:
    """Deterministic camera-to-world poses with mild seeded wobble."""
    rng = np.random.default_rng(spec.seed)
    n = spec.frames
    poses = []
    if spec.mode == "egocentric-orbit":
        # Circle whose chord between consecutive frames equals the step size.
        radius = 0.0 if n < 2 else spec.step / (2.0 * np.sin(np.pi / n))
        for i in range(n):
            ang = 2.0 * np.pi * i / max(n, 1)
            pos = np.array([radius * np.cos(ang), radius * np.sin(ang), 0.0])
            pos += 0.05 * spec.step * rng.standard_normal(3)
            yaw = spec.rot_per_frame * i
            wobble = 0.1 * spec.rot_per_frame * rng.standard_normal(3)
            pose = PoseSE3.from_rotvec((0.0, 0.0, yaw), pos).compose(
                PoseSE3.from_rotvec(wobble)
            )
            poses.append(pose)
    else:
        direction = np.array([1.0, 0.35, 0.12])
        direction /= np.linalg.norm(direction)
        for i in range(n):
            pos = (i - (n - 1) / 2.0) * spec.step * direction
            pos = pos + 0.05 * spec.step * rng.standard_normal(3)
            yaw = spec.rot_per_frame * i
            wobble = 0.1 * spec.rot_per_frame * rng.standard_normal(3)
            pose = PoseSE3.from_rotvec((0.0, 0.0, yaw), pos).compose(
                PoseSE3.from_rotvec(wobble)
            )
            poses.append(pose)
    return poses


# ---------------------------------------------------------------------------
# Monocular depth corruption oracle
# ---------------------------------------------------------------------------

CORRUPTION_REGIMES = ("absolute", "scale-invariant", "affine-invariant")


@dataclass(frozen=True)
class DepthCorruption:
    """Stand-in for the error modes of monocular depth estimators.

    ``absolute`` jitters mildly around the true depth; ``scale-invariant``
    draws an O(1) random per-frame scale; ``affine-invariant`` draws a random
    per-frame scale and shift. All regimes can add a smooth multiplicative
    low-frequency field and an edge-smoothing blur.
    """

    regime: str = "absolute"
    sigma_scale: float = 0.02
    sigma_shift: float = 0.0
    lf_amplitude: float = 0.0
    edge_radius: float = 0.0   # gaussian sigma in pixels, 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.regime not in CORRUPTION_REGIMES:
            raise ConfigError(f"unknown corruption regime {self.regime!r}")
        for name in ("sigma_scale", "sigma_shift", "lf_amplitude", "edge_radius"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def affine_depth(depth: np.ndarray, scale: float, shift: float) -> np.ndarray:
    """Apply depth' = scale*depth + shift; invalid (+inf) pixels stay invalid."""
    if scale <= 0:
        raise ConfigError("depth scale must be positive")
    return depth * scale + shift


def _low_frequency_field(shape, rng, cells=(4, 8)) -> np.ndarray:
    """Unit-amplitude smooth field from a bilinearly upsampled coarse grid."""
    coarse = rng.standard_normal(cells)
    gh, gw = cells
    h, w = shape
    ry = np.linspace(0, gh - 1, h)
    rx = np.linspace(0, gw - 1, w)
    y0 = np.clip(np.floor(ry).astype(int), 0, gh - 2)
    x0 = np.clip(np.floor(rx).astype(int), 0, gw - 2)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def corrupt_depth(depth_gt: np.ndarray, corruption: DepthCorruption,
                  frame_index: int) -> np.ndarray:
    """Produce the 'monocular' depth for one frame. Deterministic per (seed, frame)."""
    rng = np.random.default_rng([corruption.seed, frame_index])
    n_scale = rng.standard_normal()
    n_shift = rng.standard_normal()
    if corruption.regime == "absolute":
        scale = max(1.0 + corruption.sigma_scale * n_scale, 0.05)
        shift = corruption.sigma_shift * n_shift
    elif corruption.regime == "scale-invariant":
        scale = float(np.exp(corruption.sigma_scale * n_scale))
        shift = 0.0
    else:  # affine-invariant
        scale = float(np.exp(corruption.sigma_scale * n_scale))
        shift = corruption.sigma_shift * n_shift

    out = affine_depth(np.asarray(depth_gt, dtype=np.float64), scale, shift)

    if corruption.lf_amplitude > 0:
        field = _low_frequency_field(out.shape, rng)
        out = out * (1.0 + corruption.lf_amplitude * field)

    if corruption.edge_radius > 0:
        finite = np.isfinite(out)
        filled = np.where(finite, out, 0.0)
        num = ndimage.gaussian_filter(filled, corruption.edge_radius,
                                      mode=("nearest", "wrap"))
        den = ndimage.gaussian_filter(finite.astype(np.float64),
                                      corruption.edge_radius, mode=("nearest", "wrap"))
        blurred = np.where(den > 1e-9, num / np.maximum(den, 1e-9), np.inf)
        out = np.where(finite, blurred, np.inf)
    return out


# ---------------------------------------------------------------------------
# Feature-match injection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchSpec:
    """Stand-in for panoramic feature matching between two frames."""

    count: int = 300
    pixel_noise: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.outlier_fraction < 1.0):
            raise ConfigError("outlier fraction must lie in [0, 1)")
        if self.count < 0 or self.pixel_noise < 0:
            raise ConfigError("match count and pixel noise must be >= 0")


def inject_matches(frame_src: int, frame_dst: int, poses: list[PoseSE3],
                   depths: list[np.ndarray], spec: MatchSpec,
                   grid: EquirectGrid) -> np.ndarray:
    """Generate pixel-pair matches between two rendered GT frames.

    Inliers are true reprojections of source-frame surface points, perturbed
    by Gaussian pixel noise on the destination side; an exact fraction of the
    pairs is replaced by uniform random destination pixels. Returns (n, 4):
    row_src, col_src, row_dst, col_dst. Empty when no covisible surface exists.
    """
    rng = np.random.default_rng([spec.seed, frame_src, frame_dst])
    d_src, d_dst = depths[frame_src], depths[frame_dst]
    t_src, t_dst = poses[frame_src], poses[frame_dst]
    h, w = grid.shape

    ok = valid_depth(d_src)
    flat = np.flatnonzero(ok.reshape(-1))
    if flat.size == 0:
        return np.zeros((0, 4))

    n_draw = min(flat.size, spec.count * 6)
    picks = rng.choice(flat, size=n_draw, replace=n_draw > flat.size)
    rows = (picks // w).astype(np.float64)
    cols = (picks % w).astype(np.float64)

    x_world = t_src.transform(d_src.reshape(-1)[picks][:, None]
                              * pixel_to_dir(rows, cols, grid))
    y = t_dst.inverse().transform(x_world)
    dist = np.linalg.norm(y, axis=-1)
    good = dist > 1e-9
    u = y / np.maximum(dist, 1e-12)[:, None]
    r_dst, c_dst, pole = dir_to_pixel(np.where(good[:, None], u, [1.0, 0.0, 0.0]),
                                      grid)
    good &= ~pole  # clamped pole rows would make the recorded match inexact

    # Covisibility: the destination frame must see (roughly) the same surface.
    seen, seen_ok = _sample_depth(d_dst, r_dst, c_dst)
    covis = good & seen_ok & (np.abs(seen - dist) / np.maximum(dist, 1e-12) < 0.02)

    keep = np.flatnonzero(covis)[: spec.count]
    if keep.size == 0:
        return np.zeros((0, 4))
    rows, cols, r_dst, c_dst = rows[keep], cols[keep], r_dst[keep], c_dst[keep]
    n = keep.size

    if spec.pixel_noise > 0:
        r_dst = r_dst + spec.pixel_noise * rng.standard_normal(n)
        c_dst = c_dst + spec.pixel_noise * rng.standard_normal(n)

    n_out = int(round(n * spec.outlier_fraction))
    if n_out > 0:
        which = rng.choice(n, size=n_out, replace=False)
        r_dst[which] = rng.uniform(-0.5, h - 0.5, size=n_out)
        c_dst[which] = rng.uniform(-0.5, w - 0.5, size=n_out)

    r_dst = np.clip(r_dst, -0.5, h - 0.5)
    c_dst = np.mod(c_dst + 0.5, w) - 0.5
    pairs = np.stack([rows, cols, r_dst, c_dst], axis=1)
    return pairs[rng.permutation(n)]


def _sample_depth(depth, row, col):
    from .sphere import bilinear_sample

    val, ok = bilinear_sample(depth, row, col)
    return val, ok & np.isfinite(val)


# ---------------------------------------------------------------------------
# Dataset writer
# ---------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    preset: str = "room"
    grid: EquirectGrid = field(default_factory=lambda: EquirectGrid(64, 128))
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    corruption: DepthCorruption = field(default_factory=DepthCorruption)
    matches: MatchSpec = field(default_factory=MatchSpec)
    seed: int = 0


def write_dataset(out_dir, spec: DatasetSpec) -> dict:
    """Render a full synthetic dataset to disk; returns its metadata dict.

    Layout: frames/%05d.color.png, frames/%05d.depth.pfm (GT, +inf invalid),
    frames/%05d.mono.pfm (corrupted), gt_trajectory.txt (TUM), and
    matches/%05d_%05d.csv for every ordered frame pair src < dst.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "matches").mkdir(parents=True, exist_ok=True)

    scene = generate_scene(spec.preset, spec.seed)
    poses = generate_trajectory(spec.trajectory)
    n = len(poses)

    depths = []
    for i, pose in enumerate(poses):
        color, depth = raycast_pano(scene, pose, spec.grid)
        depths.append(depth)
        pio.write_color_png(out / "frames" / f"{i:05d}.color.png", color)
        pio.write_pfm(out / "frames" / f"{i:05d}.depth.pfm", depth)
        mono = corrupt_depth(depth, spec.corruption, i)
        pio.write_pfm(out / "frames" / f"{i:05d}.mono.pfm", mono)

    pio.write_tum(out / "gt_trajectory.txt", poses)

    for src in range(n):
        for dst in range(src + 1, n):
            pairs = inject_matches(src, dst, poses, depths, spec.matches, spec.grid)
            pio.write_matches_csv(out / "matches" / f"{src:05d}_{dst:05d}.csv", pairs)

    meta = {
        "preset": spec.preset,
        "frames": n,
        "grid_height": spec.grid.height,
        "grid_width": spec.grid.width,
        "bounding_diameter": scene.bounding_diameter,
        "trajectory_mode": spec.trajectory.mode,
        "seed": spec.seed,
        "corruption_regime": spec.corruption.regime,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
