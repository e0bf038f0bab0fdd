"""Shared fixtures: a small reference scene and rendered frame pairs."""

import numpy as np
import pytest

from panoslam.se3 import PoseSE3
from panoslam.simulate import generate_scene, raycast_pano
from panoslam.sphere import EquirectGrid

GRID = EquirectGrid(64, 128)


@pytest.fixture(scope="session")
def room_scene():
    return generate_scene("room", 7)


@pytest.fixture(scope="session")
def room_frames(room_scene):
    """Two nearby GT views of the reference room: (poses, colors, depths)."""
    poses = [
        PoseSE3.identity(),
        PoseSE3.from_rotvec([0.0, 0.0, 0.05], [0.08, 0.02, 0.01]),
    ]
    colors, depths = [], []
    for pose in poses:
        c, d = raycast_pano(room_scene, pose, GRID)
        colors.append(c)
        depths.append(d)
    return poses, colors, depths


def exact_ray_distances(scene, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Independent first-hit oracle: exact ray casting against the triangle soup."""
    v0 = scene.vertices[:, 0]
    e1 = scene.vertices[:, 1] - v0
    e2 = scene.vertices[:, 2] - v0
    tvec = origin - v0
    qvec = np.cross(tvec, e1)
    e2q = np.einsum("ij,ij->i", e2, qvec)
    out = np.full(len(dirs), np.inf)
    for s in range(0, len(dirs), 8192):
        d = dirs[s : s + 8192]
        pvec = np.cross(d[:, None, :], e2[None])
        det = np.einsum("ntk,tk->nt", pvec, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            uu = np.einsum("ntk,tk->nt", pvec, tvec) * inv
            vv = np.einsum("nk,tk->nt", d, qvec) * inv
            tt = e2q[None] * inv
        ok = (
            (np.abs(det) > 1e-12)
            & (uu >= -1e-9)
            & (vv >= -1e-9)
            & (uu + vv <= 1 + 1e-9)
            & (tt > 1e-9)
        )
        tt = np.where(ok, tt, np.inf)
        out[s : s + 8192] = tt.min(axis=1)
    return out
