"""Kernel intensity surfaces and case/control risk ratios on regular grids.

The estimator is an isotropic Gaussian kernel with per-point edge
correction: each kernel is divided by its own mass inside the window, so
the estimate integrates to the number of points over the window (up to
grid discretization). Ratios share a single bandwidth between numerator
and denominator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import InputError
from .geometry import PointPattern, Window

__all__ = ["GridSpec", "GridField", "kernel_intensity", "risk_ratio"]


@dataclass(frozen=True)
class GridSpec:
    """Regular grid of square cells; values live at cell centers."""

    x0: float
    y0: float
    cell: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.cell <= 0:
            raise InputError("grid cell size must be positive")
        if self.nx < 1 or self.ny < 1:
            raise InputError("grid must have at least one cell per axis")

    @classmethod
    def from_window(cls, window: Window, resolution: int) -> "GridSpec":
        """Square cells sized so the longer bbox axis has `resolution` cells."""
        x0, y0, x1, y1 = window.bounds
        ext = max(x1 - x0, y1 - y0)
        cell = ext / resolution
        nx = int(math.ceil((x1 - x0) / cell - 1e-9))
        ny = int(math.ceil((y1 - y0) / cell - 1e-9))
        return cls(x0, y0, cell, max(nx, 1), max(ny, 1))

    @property
    def cell_area(self) -> float:
        return self.cell * self.cell

    def centers_x(self) -> np.ndarray:
        return self.x0 + (np.arange(self.nx) + 0.5) * self.cell

    def centers_y(self) -> np.ndarray:
        return self.y0 + (np.arange(self.ny) + 0.5) * self.cell

    def centers(self) -> np.ndarray:
        """All cell centers as an (ny*nx, 2) array, row-major in y then x."""
        xx, yy = np.meshgrid(self.centers_x(), self.centers_y())
        return np.column_stack([xx.ravel(), yy.ravel()])

    def window_mask(self, window: Window) -> np.ndarray:
        c = self.centers()
        return window.contains(c).reshape(self.ny, self.nx)


@dataclass(frozen=True)
class GridField:
    """Values on a GridSpec with an inside-window mask.

    `values` has shape (ny, nx); NaN marks cells flagged undefined.
    """

    grid: GridSpec
    values: np.ndarray
    mask: np.ndarray
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(self.grid.ny, self.grid.nx)
        m = np.asarray(self.mask, dtype=bool).reshape(self.grid.ny, self.grid.nx)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    def integral(self) -> float:
        """Sum of defined masked values times cell area."""
        v = self.values[self.mask]
        return float(np.nansum(v) * self.grid.cell_area)

    def masked_max(self) -> float:
        v = self.values[self.mask]
        return float(np.nanmax(v)) if v.size else float("nan")

    def value_at(self, points: np.ndarray) -> np.ndarray:
        """Nearest-cell lookup; NaN outside the grid."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ix = np.floor((pts[:, 0] - self.grid.x0) / self.grid.cell).astype(int)
        iy = np.floor((pts[:, 1] - self.grid.y0) / self.grid.cell).astype(int)
        ok = (ix >= 0) & (ix < self.grid.nx) & (iy >= 0) & (iy < self.grid.ny)
        out = np.full(pts.shape[0], np.nan)
        out[ok] = self.values[iy[ok], ix[ok]]
        return out

    def to_xyz_csv(self, path, value_name: str = "value") -> None:
        """Write `x,y,value` rows for all grid cells (masked-out cells skipped)."""
        cx, cy = self.grid.centers_x(), self.grid.centers_y()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", value_name])
            for j in range(self.grid.ny):
                for i in range(self.grid.nx):
                    if self.mask[j, i]:
                        writer.writerow([repr(float(cx[i])), repr(float(cy[j])),
                                         repr(float(self.values[j, i]))])

    @classmethod
    def from_xyz_csv(cls, path, grid: GridSpec) -> "GridField":
        values = np.full((grid.ny, grid.nx), np.nan)
        mask = np.zeros((grid.ny, grid.nx), dtype=bool)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                x, y, v = float(row["x"]), float(row["y"]), float(row[reader.fieldnames[2]])
                i = int(round((x - grid.x0) / grid.cell - 0.5))
                j = int(round((y - grid.y0) / grid.cell - 0.5))
                values[j, i] = v
                mask[j, i] = True
        return cls(grid, values, mask)

    def to_ascii_grid(self, path, nodata: float = -9999.0) -> None:
        """ESRI ASCII raster; masked-out and undefined cells become NODATA."""
        vals = np.where(self.mask & np.isfinite(self.values), self.values, nodata)
        with open(path, "w") as fh:
            fh.write(f"ncols {self.grid.nx}\n")
            fh.write(f"nrows {self.grid.ny}\n")
            fh.write(f"xllcorner {self.grid.x0!r}\n")
            fh.write(f"yllcorner {self.grid.y0!r}\n")
            fh.write(f"cellsize {self.grid.cell!r}\n")
            fh.write(f"NODATA_value {nodata!r}\n")
            for j in range(self.grid.ny - 1, -1, -1):  # rasters run north to south
                fh.write(" ".join(repr(float(v)) for v in vals[j]) + "\n")


def _window_coverage(grid: GridSpec, window: Window, bandwidth: float,
                     mask: np.ndarray) -> np.ndarray:
    """Fraction of a bandwidth-`h` Gaussian kernel mass inside the window,
    evaluated at every grid cell center."""
    sigma_cells = bandwidth / grid.cell
    return gaussian_filter(mask.astype(float), sigma=sigma_cells,
                           mode="constant", cval=0.0, truncate=6.0)


def _coverage_at_points(cov: np.ndarray, grid: GridSpec, points: np.ndarray) -> np.ndarray:
    col = (points[:, 0] - grid.x0) / grid.cell - 0.5
    row = (points[:, 1] - grid.y0) / grid.cell - 0.5
    vals = map_coordinates(cov, np.vstack([row, col]), order=1, mode="nearest")
    return np.clip(vals, 1e-3, 1.0)


def kernel_intensity(pattern: PointPattern, bandwidth: float, grid: GridSpec,
                     window: Window) -> GridField:
    """Edge-corrected Gaussian kernel intensity of a single-type pattern.

    Every point's kernel is normalized by its mass inside the window, which
    preserves total mass: the field integrates to the number of points.
    An empty pattern yields an all-zero field with a warning flag instead
    of an error.
    """
    if bandwidth <= 0:
        raise InputError("bandwidth must be positive")
    mask = grid.window_mask(window)
    if pattern.n == 0:
        return GridField(grid, np.zeros((grid.ny, grid.nx)), mask,
                         warnings=("empty pattern: intensity is identically zero",))

    pts = pattern.points
    cov = _window_coverage(grid, window, bandwidth, mask)
    weights = 1.0 / _coverage_at_points(cov, grid, pts)

    centers = grid.centers()
    h2 = bandwidth * bandwidth
    norm = 1.0 / (2.0 * math.pi * h2)
    values = np.zeros(centers.shape[0])
    chunk = max(1, int(4_000_000 / max(pts.shape[0], 1)))
    for lo in range(0, centers.shape[0], chunk):
        hi = min(lo + chunk, centers.shape[0])
        d2 = ((centers[lo:hi, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        values[lo:hi] = (np.exp(-0.5 * d2 / h2) * weights[None, :]).sum(axis=1) * norm
    return GridField(grid, values.reshape(grid.ny, grid.nx), mask)


def risk_ratio(cases: PointPattern, controls: PointPattern, bandwidth: float,
               grid: GridSpec, window: Window) -> GridField:
    """Ratio of case to control kernel intensities on a shared grid.

    Cells where the control intensity falls below 1e-10 times its mean
    level are flagged undefined (NaN) rather than reported as ratios.
    """
    if cases.n == 0 or controls.n == 0:
        raise InputError("risk_ratio requires nonempty case and control patterns")
    num = kernel_intensity(cases, bandwidth, grid, window)
    den = kernel_intensity(controls, bandwidth, grid, window)
    eps = 1e-10 * controls.n / window.area
    values = np.where(den.values >= eps, num.values / np.maximum(den.values, eps), np.nan)
    warn = ()
    n_undef = int((num.mask & (den.values < eps)).sum())
    if n_undef:
        warn = (f"{n_undef} cells with near-zero control intensity flagged undefined",)
    return GridField(grid, values, num.mask, warnings=warn)
