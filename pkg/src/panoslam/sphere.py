"""Equirectangular spherical camera model and angular error metrics.

Conventions, fixed for the whole package:
  - Axes: +x forward, +z up, right handed.
  - Equirectangular raster: width W = 2*H, row 0 touches the north pole (+z).
  - Pixels are treated as cell centers, hence the +0.5 offsets:
        longitude  phi   = 2*pi*(col+0.5)/W - pi
        colatitude theta = pi*(row+0.5)/H
  - Bearing (x, y, z) = (sin(theta)cos(phi), sin(theta)sin(phi), cos(theta)),
    so the center pixel looks down +x and row 0 looks "up" toward +z.

Directions are float64 arrays of shape (..., 3); pixel coordinates are
(row, col) float64 arrays. Everything broadcasts, scalars in -> scalars out.
Depth rasters use +inf for "no surface"; ``valid_depth`` is the shared test.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class DomainError(ValueError):
    """Raised when an input lies outside a function's documented domain."""


@dataclass(frozen=True)
class EquirectGrid:
    """Equirectangular raster geometry (height rows, width = 2*height cols)."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 2:
            raise DomainError(f"grid height must be >= 2, got {self.height}")
        if self.width != 2 * self.height:
            raise DomainError(
                f"equirectangular grid requires width == 2*height, "
                f"got {self.width}x{self.height}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def pixel_angle(self) -> float:
        """Angular height of one pixel; equals its angular width at the equator."""
        return np.pi / self.height


def _check_pixel_domain(row: np.ndarray, col: np.ndarray, grid: EquirectGrid) -> None:
    # Continuous pixel domain is the closed cell cover [-0.5, N-0.5].
    if np.any(row < -0.5) or np.any(row > grid.height - 0.5) or not np.all(np.isfinite(row)):
        raise DomainError(f"row outside [-0.5, {grid.height - 0.5}]")
    if np.any(col < -0.5) or np.any(col > grid.width - 0.5) or not np.all(np.isfinite(col)):
        raise DomainError(f"col outside [-0.5, {grid.width - 0.5}]")


def pixel_to_dir(row, col, grid: EquirectGrid) -> np.ndarray:
    """Back-project continuous pixel coordinates to unit bearing vectors.

    Args:
        row: Row coordinates in [-0.5, H-0.5].
        col: Column coordinates in [-0.5, W-0.5].
        grid: Owning raster geometry.

    Returns:
        Unit directions, shape broadcast(row, col) + (3,).

    Raises:
        DomainError: If any coordinate leaves the pixel domain.
    """
    row = np.asarray(row, dtype=np.float64)
    col = np.asarray(col, dtype=np.float64)
    _check_pixel_domain(row, col, grid)
    theta = np.pi * (row + 0.5) / grid.height
    phi = 2.0 * np.pi * (col + 0.5) / grid.width - np.pi
    st = np.sin(theta)
    d = np.stack(
        np.broadcast_arrays(st * np.cos(phi), st * np.sin(phi), np.cos(theta)),
        axis=-1,
    )
    return d


def dir_to_pixel(d, grid: EquirectGrid, atol: float = 1e-6):
    """Project unit bearing vectors to continuous pixel coordinates.

    Exact inverse of :func:`pixel_to_dir` away from the poles. Directions
    whose continuous row falls outside the pixel-center band [0, H-1] are
    clamped to that band and flagged (the two pole rows).

    Args:
        d: Unit directions, shape (..., 3).
        grid: Target raster geometry.
        atol: Unit-norm tolerance.

    Returns:
        (row, col, pole) where pole is a bool array marking clamped rows.

    Raises:
        DomainError: If any input norm deviates from 1 by more than ``atol``.
    """
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norm - 1.0) > atol):
        raise DomainError("dir_to_pixel requires unit-norm directions")
    z = np.clip(d[..., 2] / norm, -1.0, 1.0)
    theta = np.arccos(z)
    phi = np.arctan2(d[..., 1], d[..., 0])
    row_cont = theta * grid.height / np.pi - 0.5
    col = (phi + np.pi) * grid.width / (2.0 * np.pi) - 0.5
    # atan2 yields phi in (-pi, pi]; fold the col == W-0.5 seam onto -0.5.
    col = np.mod(col + 0.5, grid.width) - 0.5
    pole = (row_cont < 0.0) | (row_cont > grid.height - 1.0)
    row = np.clip(row_cont, 0.0, float(grid.height - 1))
    return row, col, pole


@lru_cache(maxsize=8)
def _pixel_dir_lut(height: int, width: int) -> np.ndarray:
    grid = EquirectGrid(height, width)
    rows, cols = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    lut = pixel_to_dir(rows, cols, grid)
    lut.setflags(write=False)
    return lut


def all_pixel_dirs(grid: EquirectGrid) -> np.ndarray:
    """Read-only (H, W, 3) lookup table of pixel-center directions."""
    return _pixel_dir_lut(grid.height, grid.width)


def tangent_error(u, v):
    """Tangent-of-half-angle distance between bearing directions.

    Equals 2*tan(angle(u, v)/2); zero iff the directions coincide, 2.0 at
    90 degrees, and +inf for (near-)antipodal pairs, which is the saturated
    "drop me" signal robust loops rely on.

    Args:
        u, v: Unit directions, broadcastable (..., 3).

    Returns:
        Nonnegative error, scalar for scalar inputs.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = np.sum(u * v, axis=-1)
    antipodal = c <= -1.0 + 1e-12
    denom = np.where(antipodal, 1.0, 1.0 + c)
    err = 2.0 * np.sqrt(np.clip(1.0 - c, 0.0, None) / denom)
    err = np.where(antipodal, np.inf, err)
    if err.ndim == 0:
        return float(err)
    return err


def polar_weight(u):
    """Sine of the colatitude of a unit direction (the spherical area weight).

    1.0 on the equator, 0.0 at both poles; a pure function of the direction's
    z component.
    """
    u = np.asarray(u, dtype=np.float64)
    z = np.clip(u[..., 2], -1.0, 1.0)
    w = np.sqrt(1.0 - z * z)
    if w.ndim == 0:
        return float(w)
    return w


def valid_depth(depth: np.ndarray) -> np.ndarray:
    """Boolean mask of pixels carrying a usable depth (finite and positive)."""
    return np.isfinite(depth) & (depth > 0.0)


def bilinear_sample(img: np.ndarray, row, col):
    """Bilinear lookup with horizontal wrap-around and vertical clamping.

    Args:
        img: (H, W) or (H, W, C) raster.
        row, col: Continuous sample coordinates (any broadcastable shape).

    Returns:
        (values, valid): values has the sample shape (+ channel axis for
        multi-channel input); valid is False wherever any of the four
        contributing texels is non-finite.
    """
    row = np.asarray(row, dtype=np.float64)
    col = np.asarray(col, dtype=np.float64)
    h, w = img.shape[:2]

    r = np.clip(row, 0.0, h - 1.0)
    r0 = np.floor(r).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    fr = r - r0

    c = np.mod(col, w)
    cf = np.floor(c)
    fc = c - cf
    c0 = np.mod(cf, w).astype(np.int64)
    c1 = np.mod(c0 + 1, w)

    corners = (img[r0, c0], img[r0, c1], img[r1, c0], img[r1, c1])
    weights = ((1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc)

    valid = np.ones(np.broadcast_shapes(row.shape, col.shape), dtype=bool)
    total = None
    for val, wgt in zip(corners, weights):
        finite = np.isfinite(val)
        if val.ndim > valid.ndim:
            finite = finite.all(axis=-1)
            wgt = wgt[..., None]
        valid &= finite
        term = np.where(np.isfinite(val), val, 0.0) * wgt
        total = term if total is None else total + term
    return total, valid
