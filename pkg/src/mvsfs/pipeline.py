"""End-to-end helpers shared by the command line and the demos."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import Config
from .optim import Stage1Result, estimate_lights, resample_points, stage1_optimize
from .scene import MultiViewDataset, OrientedPointCloud, TriMesh
from .shading import SHLight, render_view
from .visualhull import OccupancyGrid, carve, initial_mesh

log = logging.getLogger(__name__)


@dataclass
class Initialization:
    grid: OccupancyGrid
    mesh: TriMesh
    points: OrientedPointCloud


def initialize(dataset: MultiViewDataset, config: Config) -> Initialization:
    """Visual hull, its mesh (largest component only) and the initial point samples."""
    grid = carve(dataset, config.grid_res_visualhull)
    mesh = initial_mesh(grid, largest_only=True)
    points = resample_points(mesh, config.n_points, np.random.SeedSequence([config.seed & 0xFFFFFFFF]))
    return Initialization(grid, mesh, points)


def reconstruct(dataset: MultiViewDataset, config: Config, log_path=None) -> tuple[Initialization, Stage1Result]:
    init = initialize(dataset, config)
    log.info("visual hull: %d cells, mesh with %d faces", int(init.grid.occupied.sum()), init.mesh.n_faces)
    return init, stage1_optimize(dataset, config, init.points, log_path)


def render_psnrs(mesh: TriMesh, dataset: MultiViewDataset, lights) -> list:
    """Per-view PSNR of shaded renders against the input images over the
    union of input mask and rendered coverage; NaN where a light is missing."""
    from .evalmetrics import psnr

    out = []
    for view, light in zip(dataset.views, lights):
        if light is None:
            out.append(float("nan"))
            continue
        img, cov, _ = render_view(mesh, view.camera, light)
        out.append(psnr(img, view.image, view.mask | cov))
    return out


def novel_view_light(mesh: TriMesh, dataset: MultiViewDataset, config: Config) -> SHLight:
    """One light fitted jointly over all training views, for rendering a
    camera that has no estimate of its own. Averaging per-view coefficients
    is not a substitute: each view sees only part of the sphere of normals,
    so individual fits are poorly conditioned in the unseen directions."""
    light = estimate_lights(mesh, dataset, True, config.init_albedo)[0]
    if light is None:
        raise ValueError("no view gives a usable light estimate")
    return light


def baseline_render_lights(mesh: TriMesh, dataset: MultiViewDataset, config: Config) -> list:
    """Lights for rendering an untextured mesh at the initial albedo."""
    return estimate_lights(mesh, dataset, config.shared_light, config.init_albedo)
