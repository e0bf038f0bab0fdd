"""Incremental tracking-and-mapping loop, dataset loading, and evaluation.

Per new frame: render depths for the visited views, build consistency masks,
lift matches into 2D-3D correspondences, solve the new pose, then (on the
visited frames only, whose poses are trustworthy) align monocular depth,
vote depth inliers, merge them into the map, accumulate and apply the
prune/reset rules, photometrically refine a sliding window of poses, and
refresh surfel colors. Frame 0 pins the world frame at the identity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import consistency as cons
from . import io as pio
from . import pose as pose_mod
from . import surfels
from .se3 import PoseSE3, rotation_angle
from .sphere import EquirectGrid, all_pixel_dirs, valid_depth
from .surfels import SurfelMap

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the loop; defaults carry the pipeline's core constants."""

    grid_height: int = 64
    init_stride: int = 2
    merge_stride: int = 3
    eps_tan: float = 0.008
    eps_dep: float = 0.05
    prune_threshold: float = 0.8
    reset_threshold: float = 0.8
    ncc_patch: int = 7
    lambda_dssim: float = 0.2
    refine_window: int = 5
    refine_iters: int = 10
    refine_step: float = 1e-4
    refine_min_coverage: float = 0.5
    refine_full_history: bool = False
    holdout_stride: int = 8       # 0 disables held-out frames
    motion_model: str = "constant_position"   # or "constant_velocity"
    use_consistency_masks: bool = True
    enable_densify: bool = True
    max_flagged_fraction: float = 0.3
    seed: int = 0
    solver: pose_mod.SolverConfig = field(default_factory=pose_mod.SolverConfig)

    def __post_init__(self):
        if self.init_stride < 1 or self.merge_stride < 1:
            raise ValueError("strides must be >= 1")
        for name in ("eps_tan", "eps_dep", "prune_threshold", "reset_threshold",
                     "lambda_dssim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.motion_model not in ("constant_position", "constant_velocity"):
            raise ValueError(f"unknown motion model {self.motion_model!r}")

    def refine_config(self) -> pose_mod.RefineConfig:
        return pose_mod.RefineConfig(
            max_iters=self.refine_iters,
            fd_step=self.refine_step,
            lambda_dssim=self.lambda_dssim,
            min_coverage=self.refine_min_coverage,
        )

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        """Parse the flat ``key = value`` config format (# comments allowed).

        Solver keys use the ``solver.`` prefix, e.g. ``solver.max_iters = 80``.
        """
        base: dict = {}
        solver: dict = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("solver."):
                solver[key[len("solver."):]] = value
            else:
                base[key] = value

        def coerce(dc_cls, raw_map):
            out = {}
            known = {f.name: f.type for f in fields(dc_cls)}
            for key, value in raw_map.items():
                if key not in known:
                    raise ValueError(f"unknown config key {key!r}")
                current = getattr(dc_cls(), key)
                if isinstance(current, bool):
                    out[key] = value.lower() in ("1", "true", "yes", "on")
                elif isinstance(current, int):
                    out[key] = int(value)
                elif isinstance(current, float):
                    out[key] = float(value)
                else:
                    out[key] = value
            return out

        base.pop("solver", None)
        kwargs = coerce(cls, base)
        kwargs["solver"] = pose_mod.SolverConfig(**coerce(pose_mod.SolverConfig, solver))
        return cls(**kwargs)

    def to_file(self, path) -> None:
        lines = []
        for f in fields(self):
            if f.name == "solver":
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        for f in fields(self.solver):
            lines.append(f"solver.{f.name} = {getattr(self.solver, f.name)}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class FrameState:
    """Bookkeeping for one processed frame.

    ``rendered_depth`` and ``masks`` hold the most recent values computed
    while this frame served as a visited view (they refresh every step, so
    after the run they reflect the final map).
    """

    index: int
    pose: PoseSE3
    flagged: bool = False
    held_out: bool = False
    solver_iterations: int = 0
    inlier_count: int = 0
    objective: float = 0.0
    n_correspondences: int = 0
    merged: int = 0
    pruned: int = 0
    reset: int = 0
    mask_density: float = 1.0
    rendered_depth: np.ndarray | None = None
    masks: dict = field(default_factory=dict)

    def log_entry(self, n_surfels: int) -> dict:
        return {
            "frame": self.index,
            "flagged": self.flagged,
            "held_out": self.held_out,
            "solver_iters": self.solver_iterations,
            "inliers": self.inlier_count,
            "objective": self.objective,
            "n_correspondences": self.n_correspondences,
            "merged": self.merged,
            "pruned": self.pruned,
            "reset": self.reset,
            "mask_density": round(self.mask_density, 6),
            "n_surfels": n_surfels,
        }


# ---------------------------------------------------------------------------
# Dataset access
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    colors: list[np.ndarray]
    mono_depths: list[np.ndarray]
    grid: EquirectGrid
    matches: dict[tuple[int, int], np.ndarray]
    gt_poses: list[PoseSE3] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.colors)


def load_dataset(path) -> Dataset:
    """Read a dataset directory (see the simulator's layout)."""
    root = Path(path)
    frame_dir = root / "frames"
    color_files = sorted(frame_dir.glob("*.color.png"))
    if not color_files:
        raise FileNotFoundError(f"no frames found under {frame_dir}")
    colors, monos = [], []
    for cf in color_files:
        idx = cf.name.split(".")[0]
        colors.append(pio.read_color_png(cf))
        monos.append(pio.read_pfm(frame_dir / f"{idx}.mono.pfm").astype(np.float64))
    h, w = colors[0].shape[:2]
    grid = EquirectGrid(h, w)

    matches: dict[tuple[int, int], np.ndarray] = {}
    for mf in sorted((root / "matches").glob("*.csv")):
        src, dst = (int(s) for s in mf.stem.split("_"))
        matches[(src, dst)] = pio.read_matches_csv(mf)

    gt = None
    gt_file = root / "gt_trajectory.txt"
    if gt_file.exists():
        gt = pio.read_tum(gt_file)

    meta = {}
    meta_file = root / "meta.json"
    if meta_file.exists():
        import json

        meta = json.loads(meta_file.read_text())
    return Dataset(colors, monos, grid, matches, gt, meta)


# ---------------------------------------------------------------------------
# Incremental loop
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    poses: list[PoseSE3]
    smap: SurfelMap
    states: list[FrameState]
    log: list[dict]
    holdout: list[int]
    failed: bool


def holdout_indices(n_frames: int, stride: int) -> list[int]:
    """Frames excluded from map construction. Frame 0 always maps."""
    if stride <= 0:
        return []
    return [i for i in range(1, n_frames) if i % stride == 0]


def _motion_init(poses: list[PoseSE3], model: str) -> PoseSE3:
    if model == "constant_velocity" and len(poses) >= 2:
        step = poses[-2].inverse().compose(poses[-1])
        return poses[-1].compose(step)
    return poses[-1]


def run_incremental(dataset: Dataset | str, cfg: PipelineConfig = PipelineConfig(),
                    dump_masks: str | None = None) -> RunResult:
    """Process every frame of the dataset in order.

    A solver failure flags the frame and falls back to the motion model; the
    run is marked failed when more than ``max_flagged_fraction`` of the
    tracked frames are flagged.
    """
    if not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset)
    n = len(dataset)
    if n < 1:
        raise ValueError("dataset has no frames")
    grid = dataset.grid
    held = set(holdout_indices(n, cfg.holdout_stride))
    dump_dir = Path(dump_masks) if dump_masks else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    smap = surfels.init_from_depth(dataset.colors[0], dataset.mono_depths[0], grid,
                                   cfg.init_stride)
    poses = [PoseSE3.identity()]
    states = [FrameState(index=0, pose=poses[0])]
    log = [states[0].log_entry(len(smap))]

    for j in range(1, n):
        state = FrameState(index=j, pose=poses[-1], held_out=j in held)
        visited = list(range(j))
        t_latest = j - 1

        renders = [surfels.render(smap, poses[k], grid) for k in visited]
        depths_r = [r.depth for r in renders]

        m_con: list[np.ndarray] = []
        for k in visited:
            if k == t_latest:
                mask = valid_depth(depths_r[k])
                if k > 0:
                    mask = mask & cons.pairwise_consistency(
                        depths_r[k], poses[k], depths_r[k - 1], poses[k - 1],
                        grid, cfg.eps_tan, cfg.eps_dep)
            else:
                mask = cons.cross_frame_mask(k, t_latest, depths_r, poses, grid,
                                             cfg.eps_tan, cfg.eps_dep)
            m_con.append(mask)
            states[k].rendered_depth = depths_r[k]
            states[k].masks["con"] = mask
        state.mask_density = float(np.mean([m.mean() for m in m_con]))

        gate_masks = m_con if cfg.use_consistency_masks else [
            np.ones(grid.shape, dtype=bool) for _ in visited
        ]
        matches_by_frame = {
            k: dataset.matches.get((k, j), np.zeros((0, 4))) for k in visited
        }
        corr = pose_mod.build_correspondences(matches_by_frame, depths_r,
                                              gate_masks, poses, grid)
        state.n_correspondences = len(corr)

        init = _motion_init(poses, cfg.motion_model)
        try:
            est = pose_mod.solve_pose(corr, init, cfg.solver)
            new_pose = est.pose
            state.solver_iterations = est.iterations
            state.inlier_count = est.inlier_count
            state.objective = est.objective
            state.flagged = not est.converged
        except pose_mod.InsufficientCorrespondences as exc:
            logger.warning("frame %d: %s; extrapolating pose", j, exc)
            new_pose = init
            state.flagged = True
        poses.append(new_pose)

        if dump_dir:
            for k in visited:
                pio.write_mask_png(dump_dir / f"t{j:03d}_Mcon_k{k:03d}.png", m_con[k])

        if cfg.enable_densify:
            _densify(smap, dataset, poses, renders, depths_r, m_con, visited,
                     held, grid, cfg, state, states, dump_dir, j)

        window = _refine_indices(j, cfg, held)
        if window:
            refined, _ = _refine_window(smap, dataset, poses, grid, cfg, window)
            for idx, p_new in zip(window, refined):
                poses[idx] = p_new

        mapped = [i for i in range(j + 1) if i not in held]
        surfels.update_colors(smap, [dataset.colors[i] for i in mapped],
                              [poses[i] for i in mapped], grid)

        state.pose = poses[j]
        states.append(state)
        log.append(state.log_entry(len(smap)))

    for st in states:
        st.pose = poses[st.index]
    flagged = sum(1 for s in states[1:] if s.flagged)
    failed = n > 1 and flagged / (n - 1) > cfg.max_flagged_fraction
    if failed:
        logger.error("run failed: %d/%d frames flagged", flagged, n - 1)
    return RunResult(poses=poses, smap=smap, states=states, log=log,
                     holdout=sorted(held), failed=failed)


def _densify(smap, dataset, poses, renders, depths_r, m_con, visited, held,
             grid, cfg, state, states, dump_dir, j) -> None:
    """Depth-inlier merging plus outlier pruning over the visited frames."""
    aligned: dict[int, np.ndarray] = {}
    for k in visited:
        try:
            _, d_a = cons.align_depth(dataset.mono_depths[k], depths_r[k], m_con[k])
            aligned[k] = d_a
        except cons.DegenerateFitError as exc:
            logger.warning("frame %d: depth alignment for view %d failed (%s)",
                           j, k, exc)

    merge_pts, merge_cols, merge_src, merge_spacing = [], [], [], []
    lut = all_pixel_dirs(grid)
    for k in visited:
        if k in held or k not in aligned:
            continue
        nbr = k - 1 if k > 0 else k + 1
        if nbr not in aligned and nbr in visited:
            continue
        if nbr not in visited:
            continue
        m_con_a = cons.pairwise_consistency(aligned[k], poses[k], aligned[nbr],
                                            poses[nbr], grid, cfg.eps_tan,
                                            cfg.eps_dep)
        m_ncc = cons.ncc_mask(dataset.colors[k], dataset.colors[nbr], aligned[k],
                              depths_r[k], poses[k], poses[nbr], grid,
                              cfg.ncc_patch)
        m_inc = cons.inconsistency_mask(m_con[k], depths_r[k])
        m_inl = cons.inlier_mask(m_inc, m_con_a, m_ncc)
        states[k].masks["inc"] = m_inc
        states[k].masks["inlier"] = m_inl

        surfels.accumulate_mask(smap, renders[k], m_inl, "inlier")
        surfels.accumulate_mask(smap, renders[k], m_inc, "inconsistent")

        sub = np.zeros(grid.shape, dtype=bool)
        sub[:: cfg.merge_stride, :: cfg.merge_stride] = True
        render_ok = valid_depth(depths_r[k])
        # inlier pixels merge only where the aligned depth materially
        # disagrees with the render (agreeing pixels are already explained);
        # render holes merge on adjacent-consistency evidence alone, since
        # the inlier mask cannot cover pixels the map does not render
        with np.errstate(invalid="ignore"):
            disagree = np.abs(aligned[k] - np.where(render_ok, depths_r[k], 1.0)) \
                > cfg.eps_dep * np.where(render_ok, depths_r[k], 1.0)
        pick = m_inl & render_ok & disagree
        pick |= ~render_ok & m_con_a
        pick &= sub & valid_depth(aligned[k])
        if np.any(pick):
            pts = poses[k].transform(aligned[k][pick, None] * lut[pick])
            footprint = aligned[k][pick] * grid.pixel_angle * cfg.merge_stride
            keep = _dedup_against_map(smap, pts, footprint)
            if np.any(keep):
                merge_pts.append(pts[keep])
                merge_cols.append(dataset.colors[k][pick][keep])
                merge_src.append(k)
                merge_spacing.append(footprint[keep])
        if dump_dir:
            pio.write_mask_png(dump_dir / f"t{j:03d}_Minlier_k{k:03d}.png", m_inl)
            pio.write_mask_png(dump_dir / f"t{j:03d}_Mncc_k{k:03d}.png", m_ncc)
            pio.write_mask_png(dump_dir / f"t{j:03d}_Minc_k{k:03d}.png", m_inc)

    for pts, cols, src, spc in zip(merge_pts, merge_cols, merge_src, merge_spacing):
        surfels.merge_points(smap, pts, cols, src, spacing=spc)
        state.merged += len(pts)
    n_pruned, n_reset = surfels.prune_and_reset(smap, cfg.prune_threshold,
                                                cfg.reset_threshold)
    state.pruned, state.reset = n_pruned, n_reset


def _dedup_against_map(smap, points: np.ndarray, footprint: np.ndarray) -> np.ndarray:
    """Keep only candidates farther from every existing surfel than ~their
    own pixel footprint; re-merging already-mapped surface wastes primitives
    and z-fights the originals."""
    if len(smap) == 0:
        return np.ones(len(points), dtype=bool)
    from scipy.spatial import cKDTree

    dist, _ = cKDTree(smap.positions).query(points, k=1)
    return dist > 0.75 * footprint


def _refine_indices(j: int, cfg: PipelineConfig, held: set[int]) -> list[int]:
    """Poses to refine after frame j. Frame 0 stays pinned as the gauge."""
    if cfg.refine_iters < 1:
        return []
    if cfg.refine_full_history:
        lo = 1
    else:
        lo = max(1, j - cfg.refine_window + 1)
    return list(range(lo, j + 1))


def _refine_window(smap, dataset, poses, grid, cfg, window):
    lo = max(0, min(window) - 1)
    hi = min(len(poses) - 1, max(window) + 1)
    local = list(range(lo, hi + 1))
    depths = [surfels.render(smap, poses[k], grid).depth for k in local]
    local_poses = [poses[k] for k in local]
    masks = [cons.adjacent_mask(k - lo, depths, local_poses, grid,
                                cfg.eps_tan, cfg.eps_dep) for k in window]
    refined, records = pose_mod.refine_pose_photometric(
        smap,
        [dataset.colors[k] for k in window],
        [poses[k] for k in window],
        masks,
        grid,
        cfg.refine_config(),
    )
    return refined, records


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    """Trajectory and render quality numbers; None where not applicable.

    ``psnr_db`` averages over valid rendered pixels only; ``psnr_full_db``
    scores all pixels with uncovered ones filled mid-gray, so denser maps are
    rewarded rather than penalized for covering hard regions.
    """

    ate_rms: float | None = None
    rpe_t_rms: float | None = None
    rpe_t_median: float | None = None
    rpe_r_deg_rms: float | None = None
    rpe_r_deg_median: float | None = None
    psnr_db: float | None = None
    psnr_full_db: float | None = None
    ssim: float | None = None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def merged_with(self, other: "Metrics") -> "Metrics":
        out = replace(self)
        for f in fields(other):
            val = getattr(other, f.name)
            if val is not None:
                out = replace(out, **{f.name: val})
        return out


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Closed-form similarity (s, R, t) minimizing ||dst - (s R src + t)||^2."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    var_s = np.mean(np.sum(xs**2, axis=1))
    if with_scale and var_s > 1e-18:
        scale = float(np.trace(np.diag(d) @ s_fix) / var_s)
    else:
        scale = 1.0
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


def eval_trajectory(est: list[PoseSE3], gt: list[PoseSE3]):
    """ATE after similarity alignment plus per-pair relative pose errors.

    Relative translation errors are reported in scene units per frame pair,
    with the estimate's global scale corrected by the alignment; rotation
    errors are alignment-free.

    Returns:
        (Metrics, per_frame) where per_frame maps metric name -> array.
    """
    if len(est) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(est)} vs {len(gt)}")
    if len(est) == 0:
        raise ValueError("empty trajectories")
    p_est = np.array([p.trans for p in est])
    p_gt = np.array([p.trans for p in gt])
    scale, rot, trans = umeyama_alignment(p_est, p_gt)
    aligned = (scale * (rot @ p_est.T)).T + trans
    ate = float(np.sqrt(np.mean(np.sum((aligned - p_gt) ** 2, axis=1))))

    metrics = Metrics(ate_rms=ate)
    per_frame: dict[str, np.ndarray] = {
        "ate": np.linalg.norm(aligned - p_gt, axis=1)
    }
    if len(est) >= 2:
        rpe_t, rpe_r = [], []
        for i in range(len(est) - 1):
            rel_e = est[i].inverse().compose(est[i + 1])
            rel_g = gt[i].inverse().compose(gt[i + 1])
            rel_e_scaled = PoseSE3(rel_e.quat, rel_e.trans * scale)
            err = rel_g.inverse().compose(rel_e_scaled)
            rpe_t.append(np.linalg.norm(err.trans))
            rpe_r.append(np.degrees(rotation_angle(err.rotation_matrix())))
        rpe_t = np.asarray(rpe_t)
        rpe_r = np.asarray(rpe_r)
        metrics.rpe_t_rms = float(np.sqrt(np.mean(rpe_t**2)))
        metrics.rpe_t_median = float(np.median(rpe_t))
        metrics.rpe_r_deg_rms = float(np.sqrt(np.mean(rpe_r**2)))
        metrics.rpe_r_deg_median = float(np.median(rpe_r))
        per_frame["rpe_t"] = rpe_t
        per_frame["rpe_r_deg"] = rpe_r
    return metrics, per_frame


def psnr(rendered: np.ndarray, reference: np.ndarray,
         valid: np.ndarray | None = None, dynamic_range: float = 1.0) -> float:
    """PSNR over valid pixels; +inf for an exact match."""
    if valid is None:
        valid = np.ones(rendered.shape[:2], dtype=bool)
    if not np.any(valid):
        return float("nan")
    diff = (rendered - reference)[valid]
    mse = float(np.mean(diff**2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(dynamic_range**2 / mse))


def eval_render(smap: SurfelMap, poses: list[PoseSE3], frames: list[np.ndarray],
                indices: list[int], grid: EquirectGrid):
    """Held-out view synthesis quality: masked PSNR and SSIM per frame.

    Frames that render zero valid pixels are skipped with a warning.

    Returns:
        (Metrics, per_frame dict with indices/psnr/ssim/invalid_fraction).
    """
    rows = []
    for idx in indices:
        out = surfels.render(smap, poses[idx], grid)
        if not np.any(out.valid):
            logger.warning("render-eval: frame %d rendered no valid pixels", idx)
            continue
        ref = frames[idx]
        filled = np.where(out.valid[..., None], out.color, ref)
        ssim_map = pose_mod.ssim(filled, ref)
        gray_filled = np.where(out.valid[..., None], out.color, 0.5)
        rows.append(
            (idx, psnr(out.color, ref, out.valid), psnr(gray_filled, ref),
             float(ssim_map[out.valid].mean()), out.invalid_fraction())
        )
    if not rows:
        return Metrics(), {"indices": [], "psnr": [], "psnr_full": [],
                           "ssim": [], "invalid_fraction": []}
    idxs, psnrs, psnrs_full, ssims, invalid = (list(v) for v in zip(*rows))
    metrics = Metrics(psnr_db=float(np.mean(psnrs)),
                      psnr_full_db=float(np.mean(psnrs_full)),
                      ssim=float(np.mean(ssims)))
    per = {"indices": idxs, "psnr": psnrs, "psnr_full": psnrs_full,
           "ssim": ssims, "invalid_fraction": invalid}
    return metrics, per


def save_run_outputs(result: RunResult, out_dir, cfg: PipelineConfig) -> None:
    """Persist trajectory, log, map snapshot, and config echo for a run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pio.write_tum(out / "trajectory.txt", result.poses)
    pio.write_jsonl(out / "log.jsonl", result.log)
    pio.write_surfel_ply(out / "map.ply", result.smap.positions, result.smap.colors,
                         result.smap.radii, result.smap.opacities)
    cfg.to_file(out / "config.txt")
