"""Command line interface: simulate / run / eval / render-eval."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import figures, io as pio, pipeline, simulate
from .sphere import EquirectGrid

logger = logging.getLogger("panoslam")

_TRAJ_MODES = {"ego": "egocentric-orbit", "nonego": "non-egocentric-sweep"}
_CORRUPTIONS = {"absolute": "absolute", "scale": "scale-invariant",
                "affine": "affine-invariant"}


def _cmd_simulate(args) -> int:
    grid = EquirectGrid(args.height, 2 * args.height)
    spec = simulate.DatasetSpec(
        preset=args.preset,
        grid=grid,
        trajectory=simulate.TrajectorySpec(
            mode=_TRAJ_MODES[args.trajectory],
            frames=args.frames,
            step=args.step,
            rot_per_frame=np.radians(args.rot_deg),
            seed=args.seed,
        ),
        corruption=simulate.DepthCorruption(
            regime=_CORRUPTIONS[args.corruption],
            sigma_scale=args.sigma_scale,
            sigma_shift=args.sigma_shift,
            lf_amplitude=args.lf_amp,
            edge_radius=args.edge_radius,
            seed=args.seed,
        ),
        matches=simulate.MatchSpec(
            count=args.matches_per_pair,
            pixel_noise=args.match_noise,
            outlier_fraction=args.outlier_frac,
            seed=args.seed,
        ),
        seed=args.seed,
    )
    meta = simulate.write_dataset(args.out, spec)
    logger.info("wrote %d-frame %s dataset to %s", meta["frames"], meta["preset"],
                args.out)
    return 0


def _cmd_run(args) -> int:
    cfg = pipeline.PipelineConfig.from_file(args.config) if args.config \
        else pipeline.PipelineConfig()
    dataset = pipeline.load_dataset(args.dataset)
    result = pipeline.run_incremental(dataset, cfg, dump_masks=args.dump_masks)
    out = figures.ensure_dir(args.out)
    pipeline.save_run_outputs(result, out, cfg)

    with open(out / "per_frame.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=sorted(result.log[0].keys()))
        writer.writeheader()
        writer.writerows(result.log)

    est = np.array([p.trans for p in result.poses])
    gt = (np.array([p.trans for p in dataset.gt_poses])
          if dataset.gt_poses else None)
    save_figs = figures.ensure_dir(out / "figures")
    figures.save_trajectory_figure(save_figs / "trajectory.png", est, gt)
    figures.save_run_summary_figure(save_figs / "run_summary.png", result.log)

    logger.info("run %s: %d frames, %d surfels, outputs in %s",
                "FAILED" if result.failed else "ok", len(result.poses),
                len(result.smap), out)
    return 1 if result.failed else 0


def _cmd_eval(args) -> int:
    est = pio.read_tum(args.est)
    gt = pio.read_tum(args.gt)
    metrics, per_frame = pipeline.eval_trajectory(est, gt)
    pio.write_metrics_json(args.out, metrics.as_dict())

    out_dir = Path(args.out).parent
    if args.per_frame_csv:
        with open(args.per_frame_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "ate"])
            for i, v in enumerate(per_frame["ate"]):
                writer.writerow([i, f"{v:.9f}"])
            if "rpe_t" in per_frame:
                writer.writerow([])
                writer.writerow(["pair", "rpe_t", "rpe_r_deg"])
                for i, (t, r) in enumerate(zip(per_frame["rpe_t"],
                                               per_frame["rpe_r_deg"])):
                    writer.writerow([i, f"{t:.9f}", f"{r:.9f}"])

    if not args.no_figures:
        fig_dir = figures.ensure_dir(args.figures or out_dir / "figures")
        figures.save_trajectory_figure(
            fig_dir / "trajectory.png",
            np.array([p.trans for p in est]),
            np.array([p.trans for p in gt]),
        )
        series = {"ATE": per_frame["ate"]}
        figures.save_per_frame_figure(fig_dir / "ate_per_frame.png", series,
                                      "error [scene units]", "per-frame ATE")
        if "rpe_t" in per_frame:
            figures.save_per_frame_figure(
                fig_dir / "rpe_per_pair.png",
                {"RPE_t": per_frame["rpe_t"], "RPE_r [deg]": per_frame["rpe_r_deg"]},
                "error", "per-pair RPE")
    for key, val in metrics.as_dict().items():
        if val is not None:
            logger.info("%s: %.6g", key, val)
    return 0


def _cmd_render_eval(args) -> int:
    positions, colors, radii, opacities = pio.read_surfel_ply(args.map)
    smap = pipeline.SurfelMap.from_arrays(positions, radii, colors, opacities)

    dataset = pipeline.load_dataset(args.dataset)
    traj_file = Path(args.trajectory) if args.trajectory else None
    if traj_file and traj_file.exists():
        poses = pio.read_tum(traj_file)
    elif dataset.gt_poses:
        poses = dataset.gt_poses
    else:
        logger.error("no trajectory available (pass --trajectory)")
        return 2
    indices = pipeline.holdout_indices(len(dataset), args.holdout)
    metrics, per_frame = pipeline.eval_render(smap, poses, dataset.colors,
                                              indices, dataset.grid)
    pio.write_metrics_json(args.out, metrics.as_dict())

    out_dir = Path(args.out).parent
    with open(out_dir / "render_per_frame.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "psnr_db", "psnr_full_db", "ssim",
                         "invalid_fraction"])
        for row in zip(per_frame["indices"], per_frame["psnr"],
                       per_frame["psnr_full"], per_frame["ssim"],
                       per_frame["invalid_fraction"]):
            writer.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}",
                             f"{row[3]:.6f}", f"{row[4]:.6f}"])
    if not args.no_figures and per_frame["indices"]:
        fig_dir = figures.ensure_dir(out_dir / "figures")
        figures.save_render_metrics_figure(fig_dir / "render_metrics.png",
                                           per_frame["indices"],
                                           per_frame["psnr"], per_frame["ssim"])
    if metrics.psnr_db is not None:
        logger.info("held-out PSNR %.3f dB, SSIM %.4f", metrics.psnr_db,
                    metrics.ssim)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panoslam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a synthetic panoramic dataset")
    sim.add_argument("--preset", choices=["room", "courtyard"], default="room")
    sim.add_argument("--frames", type=int, default=12)
    sim.add_argument("--trajectory", choices=sorted(_TRAJ_MODES), default="ego")
    sim.add_argument("--corruption", choices=sorted(_CORRUPTIONS),
                     default="absolute")
    sim.add_argument("--out", required=True)
    sim.add_argument("--height", type=int, default=64)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--step", type=float, default=0.08)
    sim.add_argument("--rot-deg", type=float, default=3.0)
    sim.add_argument("--sigma-scale", type=float, default=0.02)
    sim.add_argument("--sigma-shift", type=float, default=0.0)
    sim.add_argument("--lf-amp", type=float, default=0.0)
    sim.add_argument("--edge-radius", type=float, default=0.0)
    sim.add_argument("--matches-per-pair", type=int, default=300)
    sim.add_argument("--match-noise", type=float, default=0.0)
    sim.add_argument("--outlier-frac", type=float, default=0.0)
    sim.set_defaults(func=_cmd_simulate)

    run = sub.add_parser("run", help="track and map a dataset")
    run.add_argument("--dataset", required=True)
    run.add_argument("--config", default=None)
    run.add_argument("--out", required=True)
    run.add_argument("--dump-masks", default=None)
    run.set_defaults(func=_cmd_run)

    ev = sub.add_parser("eval", help="compare trajectories (TUM format)")
    ev.add_argument("--est", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--per-frame-csv", default=None)
    ev.add_argument("--figures", default=None)
    ev.add_argument("--no-figures", action="store_true")
    ev.set_defaults(func=_cmd_eval)

    re = sub.add_parser("render-eval", help="held-out view synthesis quality")
    re.add_argument("--map", required=True)
    re.add_argument("--dataset", required=True)
    re.add_argument("--holdout", type=int, default=8)
    re.add_argument("--trajectory", default=None)
    re.add_argument("--out", required=True)
    re.add_argument("--no-figures", action="store_true")
    re.set_defaults(func=_cmd_render_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
