"""Silhouette carving of an occupancy volume and the initialization mesh."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .scene import MultiViewDataset, TriMesh, SceneError

log = logging.getLogger(__name__)


class NoGeometryError(SceneError):
    pass


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Binary cells over ``bounds``; ``occupied[i, j, k]`` covers the cell whose
    center is ``bounds[0] + (index + 0.5) * cell_size`` (x, y, z axis order)."""

    occupied: np.ndarray
    bounds: np.ndarray

    @property
    def res(self) -> int:
        return self.occupied.shape[0]

    @property
    def cell_size(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / np.array(self.occupied.shape)

    def cell_centers(self, k: int | None = None) -> np.ndarray:
        """World centers of all cells (res³×3), or of z-slice ``k`` (res²×3)."""
        nx, ny, nz = self.occupied.shape
        h = self.cell_size
        zs = np.arange(nz) if k is None else np.array([k])
        i, j, kk = np.meshgrid(np.arange(nx), np.arange(ny), zs, indexing="ij")
        idx = np.stack([i, j, kk], axis=-1).reshape(-1, 3)
        return self.bounds[0] + (idx + 0.5) * h

    def contains(self, points: np.ndarray, dilate: int = 0) -> np.ndarray:
        """Whether points fall in an occupied cell (after ``dilate`` cells of dilation)."""
        occ = self.occupied
        if dilate:
            occ = ndimage.binary_dilation(occ, structure=np.ones((3, 3, 3), bool), iterations=dilate)
        idx = np.floor((np.asarray(points) - self.bounds[0]) / self.cell_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(occ.shape)), axis=1)
        out = np.zeros(len(idx), dtype=bool)
        ii = idx[inside]
        out[inside] = occ[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out


def carve(dataset: MultiViewDataset, res: int = 128) -> OccupancyGrid:
    """Keep every cell whose center projects in front of each camera onto a
    foreground mask pixel. A view whose image rectangle the center misses
    does not constrain that cell."""
    if res < 8:
        raise ValueError(f"visual hull resolution must be >= 8, got {res}")
    bounds = np.asarray(dataset.bounds, dtype=np.float64)
    occ = np.ones((res, res, res), dtype=bool)
    grid = OccupancyGrid(occ, bounds)
    if any(not v.mask.any() for v in dataset.views):
        log.warning("a view has an empty mask; the visual hull is empty")
        occ[:] = False
        return grid
    for k in range(res):
        pts = grid.cell_centers(k)
        keep = np.ones(len(pts), dtype=bool)
        for view in dataset.views:
            cam = view.camera
            pc = cam.world_to_camera(pts)
            z = pc[:, 2]
            front = z > 0
            h = pc @ cam.K.T
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.round(h[:, 0] / h[:, 2])
                v = np.round(h[:, 1] / h[:, 2])
            in_img = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
            fg = np.zeros(len(pts), dtype=bool)
            fg[in_img] = view.mask[v[in_img].astype(np.int64), u[in_img].astype(np.int64)]
            keep &= front & (fg | ~in_img)
        occ[:, :, k] = keep.reshape(res, res)
    return grid


def largest_component(grid: OccupancyGrid) -> OccupancyGrid:
    """Only the largest 6-connected occupied component, which drops blobs
    in corners of the bounds that no camera observes."""
    lab, n = ndimage.label(grid.occupied)
    if n <= 1:
        return grid
    sizes = np.bincount(lab.ravel())[1:]
    return OccupancyGrid(lab == 1 + int(np.argmax(sizes)), grid.bounds)


def initial_mesh(grid: OccupancyGrid, largest_only: bool = False) -> TriMesh:
    """Closed mesh around the occupied cells.

    The occupancy is blended half-and-half with its 3×3×3 box average before
    extraction at level 0.5; this rounds stair steps while keeping isolated
    cells, and leaves planar boundaries exactly halfway between cell centers.
    """
    from .isosurface import marching_cubes

    if not grid.occupied.any():
        raise NoGeometryError("occupancy grid is empty; nothing to mesh")
    if largest_only:
        grid = largest_component(grid)
    occ = grid.occupied.astype(np.float64)
    padded = np.pad(occ, 2)
    smooth = 0.5 * padded + 0.5 * ndimage.uniform_filter(padded, size=3, mode="constant")
    h = grid.cell_size
    origin = grid.bounds[0] + 0.5 * h - 2 * h
    return marching_cubes(smooth, origin, h, level=0.5)
