import numpy as np
import pytest

from mvsfs.evalmetrics import chamfer_l1, sample_surface
from mvsfs.scene import MultiViewDataset, TriMesh, View
from mvsfs.shading import SHLight
from mvsfs.synthetic import cube, icosphere, render_dataset, ring_cameras
from mvsfs.visualhull import NoGeometryError, OccupancyGrid, carve, initial_mesh

BOUNDS = np.array([[-0.5] * 3, [0.5] * 3])


def _sphere_dataset(radius=0.3, views=20, res=96):
    ico = icosphere(4)
    mesh = TriMesh(radius * ico.vertices, ico.faces, vertex_albedo=np.full((ico.n_vertices, 3), 0.5))
    cams = ring_cameras(views, res, distance=1.6)
    return mesh, render_dataset(mesh, SHLight.ambient(), cams, BOUNDS)


@pytest.fixture(scope="module")
def sphere_data():
    return _sphere_dataset()


def test_all_foreground_occupies_frusta(sphere_data):
    _, ds = sphere_data
    full = MultiViewDataset(tuple(View(v.image, np.ones_like(v.mask), v.camera) for v in ds.views), BOUNDS)
    grid = carve(full, 16)
    assert grid.occupied.all()


def test_one_empty_mask_gives_empty_grid(sphere_data):
    _, ds = sphere_data
    views = list(ds.views)
    views[3] = View(views[3].image, np.zeros_like(views[3].mask), views[3].camera)
    grid = carve(MultiViewDataset(tuple(views), BOUNDS), 16)
    assert not grid.occupied.any()


def _analytic_sphere_masks(cameras, radius):
    """Masks from exact ray/sphere intersection through each pixel center."""
    views = []
    for cam in cameras:
        v, u = np.mgrid[0:cam.height, 0:cam.width]
        rays = np.stack([u, v, np.ones_like(u)], -1).reshape(-1, 3) @ np.linalg.inv(cam.K).T
        rays = rays @ cam.T[:3, :3]  # to world directions
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        c = cam.center
        b = rays @ c
        hit = b**2 - (c @ c - radius**2) >= 0
        mask = hit.reshape(cam.height, cam.width)
        views.append(View(np.zeros((cam.height, cam.width, 3)), mask, cam))
    return MultiViewDataset(tuple(views), BOUNDS)


def test_sphere_interior_cells_are_kept():
    cams = ring_cameras(20, 96, distance=1.6)
    grid = carve(_analytic_sphere_masks(cams, 0.3), 48)
    r = np.linalg.norm(grid.cell_centers(), axis=1)
    # pixel-center sampling can shave up to one pixel footprint off the rim
    footprint = 1.6 / cams[0].K[0, 0]
    assert grid.occupied.reshape(-1)[r < 0.3 - footprint].all()


def test_superset_of_surface(sphere_data):
    mesh, ds = sphere_data
    grid = carve(ds, 64)
    pts, _, _ = sample_surface(mesh, 20000, 0)
    assert grid.contains(pts, dilate=1).all()


def test_shrinking_a_mask_never_grows_hull(sphere_data):
    _, ds = sphere_data
    base = carve(ds, 32).occupied
    views = list(ds.views)
    m = views[0].mask.copy()
    m[:, : m.shape[1] // 2] = False
    views[0] = View(views[0].image, m, views[0].camera)
    shrunk = carve(MultiViewDataset(tuple(views), BOUNDS), 32).occupied
    assert not (shrunk & ~base).any()
    assert shrunk.sum() < base.sum()


def test_single_cell_mesh_is_closed_and_close_to_cube():
    occ = np.zeros((8, 8, 8), bool)
    occ[3, 4, 2] = True
    grid = OccupancyGrid(occ, np.array([[0.0] * 3, [8.0] * 3]))
    mesh = initial_mesh(grid)
    assert mesh.is_watertight()
    c = cube(0.5, 4)
    cell = TriMesh(c.vertices + np.array([3.5, 4.5, 2.5]), c.faces)
    assert chamfer_l1(mesh, cell, 5000) < 1.0


def test_full_grid_mesh_follows_bounds():
    grid = OccupancyGrid(np.ones((10, 10, 10), bool), np.array([[-1.0] * 3, [1.0] * 3]))
    mesh = initial_mesh(grid)
    assert mesh.is_watertight()
    # the blended field crosses 0.5 halfway between the outermost centers and the outside
    assert np.allclose(np.abs(mesh.vertices).max(axis=0), 1.0, atol=0.11)


def test_empty_grid_raises():
    with pytest.raises(NoGeometryError):
        initial_mesh(OccupancyGrid(np.zeros((8, 8, 8), bool), BOUNDS))


def test_sphere_carve_mesh_accuracy():
    ico = icosphere(4)
    mesh = TriMesh(0.3 * ico.vertices, ico.faces, vertex_albedo=np.full((ico.n_vertices, 3), 0.5))
    ds = render_dataset(mesh, SHLight.ambient(), ring_cameras(24, 256, distance=1.6), BOUNDS)
    grid = carve(ds, 128)
    vh = initial_mesh(grid, largest_only=True)
    assert vh.is_watertight()
    h = 1.0 / 128
    assert chamfer_l1(vh, mesh, 20000) < 2 * h
