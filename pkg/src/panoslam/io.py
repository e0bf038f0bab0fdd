"""File formats: PFM depth, PNG color, TUM trajectories, match CSVs, PLY maps."""

from __future__ import annotations

import json
from pathlib import Path

import imageio.v3 as iio
import numpy as np

from .se3 import PoseSE3


def write_pfm(path, data: np.ndarray) -> None:
    """Write a single-channel float32 PFM (little endian, bottom-up rows)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise ValueError(f"unsupported PFM header {header!r}")
        width, height = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(width * height * 4), dtype="<f4" if scale < 0 else ">f4")
    return np.flipud(data.reshape(height, width)).astype(np.float32)


def write_color_png(path, img: np.ndarray) -> None:
    """Store a float RGB image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    iio.imwrite(path, (arr * 255.0 + 0.5).astype(np.uint8))


def read_color_png(path) -> np.ndarray:
    arr = iio.imread(path)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return arr[..., :3].astype(np.float64) / 255.0


def write_mask_png(path, mask: np.ndarray) -> None:
    iio.imwrite(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def write_tum(path, poses: list[PoseSE3]) -> None:
    """One line per frame: index tx ty tz qx qy qz qw."""
    lines = []
    for i, pose in enumerate(poses):
        tx, ty, tz = pose.trans
        w, x, y, z = pose.quat
        lines.append(
            f"{i} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path) -> list[PoseSE3]:
    poses = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 8:
            raise ValueError(f"bad TUM line: {line!r}")
        _, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in vals)
        poses.append(PoseSE3(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    return poses


def write_matches_csv(path, pairs: np.ndarray) -> None:
    """Pairs is (n, 4): row_src, col_src, row_dst, col_dst."""
    pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 4)
    lines = ["row_src,col_src,row_dst,col_dst"]
    lines += [f"{a:.6f},{b:.6f},{c:.6f},{d:.6f}" for a, b, c, d in pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matches_csv(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    rows = [tuple(float(v) for v in line.split(",")) for line in lines[1:] if line.strip()]
    if not rows:
        return np.zeros((0, 4))
    return np.asarray(rows, dtype=np.float64)


def write_jsonl(path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def write_metrics_json(path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


_PLY_PROPS = ("x", "y", "z", "red", "green", "blue", "radius", "opacity")


def write_surfel_ply(path, positions, colors, radii, opacities) -> None:
    """ASCII PLY point cloud: position, 8-bit color, radius, opacity."""
    n = len(positions)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property float radius",
        "property float opacity",
        "end_header",
    ]
    rgb = (np.clip(colors, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    lines = header + [
        f"{p[0]:.8f} {p[1]:.8f} {p[2]:.8f} {c[0]} {c[1]} {c[2]} {r:.8f} {o:.8f}"
        for p, c, r, o in zip(positions, rgb, radii, opacities)
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_surfel_ply(path):
    """Parse a surfel PLY back into (positions, colors, radii, opacities)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError("not a PLY file")
    n = 0
    props = []
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        elif tok and tok[0] == "property":
            props.append(tok[2])
        elif tok and tok[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None or tuple(props) != _PLY_PROPS:
        raise ValueError(f"unexpected PLY layout: {props}")
    data = np.array(
        [[float(v) for v in line.split()] for line in lines[body_start : body_start + n]]
    ).reshape(n, 8)
    positions = data[:, :3]
    colors = data[:, 3:6] / 255.0
    radii = data[:, 6]
    opacities = data[:, 7]
    return positions, colors, radii, opacities
