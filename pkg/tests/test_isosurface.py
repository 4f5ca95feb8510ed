import numpy as np
import pytest

from mvsfs.isosurface import EmptyMeshError, edge_crossing, marching_cubes, mc_adjoint


def _sphere_field(res, radius, lo=-0.5, hi=0.5):
    h = (hi - lo) / (res - 1)
    x = lo + h * np.arange(res)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    return radius - np.sqrt(X**2 + Y**2 + Z**2), np.full(3, lo), h


def test_constant_grid_has_no_surface():
    with pytest.raises(EmptyMeshError):
        marching_cubes(np.zeros((4, 4, 4)), np.zeros(3), 1.0)


def test_edge_midpoint():
    t, da, db = edge_crossing(-1.0, 1.0, 0.0)
    assert t == 0.5
    # derivatives of t = (level - fa) / (fb - fa)
    eps = 1e-6
    assert abs(da - (edge_crossing(-1 + eps, 1, 0)[0] - edge_crossing(-1 - eps, 1, 0)[0]) / (2 * eps)) < 1e-6
    assert abs(db - (edge_crossing(-1, 1 + eps, 0)[0] - edge_crossing(-1, 1 - eps, 0)[0]) / (2 * eps)) < 1e-6


def test_sphere_vertices_near_radius():
    f, origin, h = _sphere_field(32, 0.3)
    mesh = marching_cubes(f, origin, h)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert r.min() >= 0.3 - h and r.max() <= 0.3 + h
    assert mesh.is_watertight()
    # normals point outward and are unit length
    assert np.allclose(np.linalg.norm(mesh.vertex_normals, axis=1), 1)
    assert np.all(np.einsum("ij,ij->i", mesh.vertex_normals, mesh.vertices) > 0)


def test_border_touching_surface_is_capped():
    f = np.ones((6, 6, 6))
    f[0] = -1  # the level set reaches the x = 0 face
    mesh = marching_cubes(f, np.zeros(3), 1.0)
    assert mesh.is_watertight()


def test_raising_level_shrinks_sphere():
    f, origin, h = _sphere_field(32, 0.3)
    radii = [np.linalg.norm(marching_cubes(f, origin, h, level).vertices, axis=1).mean()
             for level in (-0.05, 0.0, 0.05, 0.1)]
    assert np.all(np.diff(radii) < 0)


def test_random_fields_are_watertight(rng):
    from scipy.ndimage import gaussian_filter

    for _ in range(5):
        f = gaussian_filter(rng.normal(size=(24, 24, 24)), 2.0)
        f[[0, -1]] = f[:, [0, -1]] = f[:, :, [0, -1]] = -1
        assert marching_cubes(f, np.zeros(3), 0.1).is_watertight()


def test_adjoint_zero_gradient():
    f, origin, h = _sphere_field(16, 0.3)
    mesh = marching_cubes(f, origin, h)
    assert not mc_adjoint(np.zeros_like(mesh.vertices), mesh, f, origin, h).any()


def test_single_edge_derivative_matches_fd():
    # one positive node: every vertex sits on an edge leaving that node
    f = -np.ones((5, 5, 5))
    f[2, 2, 2] = 0.6
    f[3, 2, 2] = -0.4
    mesh = marching_cubes(f, np.zeros(3), 1.0)
    k = np.argmax(mesh.vertices[:, 0])  # the vertex on the +x edge
    assert np.allclose(mesh.vertices[k], [2.6, 2, 2])
    g = np.zeros_like(mesh.vertices)
    g[k, 0] = 1.0
    adj = mc_adjoint(g, mesh, f, np.zeros(3), 1.0)
    _, da, db = edge_crossing(0.6, -0.4, 0.0)
    eps = 1e-6
    for node, analytic in (((2, 2, 2), da), ((3, 2, 2), db)):
        fp, fm = f.copy(), f.copy()
        fp[node] += eps
        fm[node] -= eps
        xp = marching_cubes(fp, np.zeros(3), 1.0).vertices[:, 0].max()
        xm = marching_cubes(fm, np.zeros(3), 1.0).vertices[:, 0].max()
        fd = (xp - xm) / (2 * eps)
        assert abs(fd - analytic) < 1e-6
        # with no transverse gradient the inverse-normal rule is the edge derivative
        assert abs(adj[node] - analytic) < 1e-12


def test_mean_radius_adjoint_vs_fd(rng):
    f, origin, h = _sphere_field(16, 0.3)
    mesh = marching_cubes(f, origin, h)
    r = np.linalg.norm(mesh.vertices, axis=1)
    g = mesh.vertices / r[:, None] / mesh.n_vertices
    adj = mc_adjoint(g, mesh, f, origin, h)
    near = np.argwhere(np.abs(f) < 0.6 * h)
    cells = near[rng.choice(len(near), 20, replace=False)]
    eps = 1e-5
    fd = []
    assert np.abs(f[tuple(cells.T)]).min() > 10 * eps
    for c in cells:
        fp, fm = f.copy(), f.copy()
        fp[tuple(c)] += eps
        fm[tuple(c)] -= eps
        mp = np.linalg.norm(marching_cubes(fp, origin, h).vertices, axis=1).mean()
        mm = np.linalg.norm(marching_cubes(fm, origin, h).vertices, axis=1).mean()
        fd.append((mp - mm) / (2 * eps))
    fd = np.array(fd)
    got = np.array([adj[tuple(c)] for c in cells])
    assert np.linalg.norm(got - fd) <= 5e-2 * np.linalg.norm(fd)


def test_adjoint_is_local():
    f, origin, h = _sphere_field(16, 0.3)
    mesh = marching_cubes(f, origin, h)
    adj = mc_adjoint(np.ones_like(mesh.vertices), mesh, f, origin, h)
    from scipy.ndimage import binary_dilation

    sign = f > 0
    boundary = binary_dilation(sign) & binary_dilation(~sign)
    assert not adj[~boundary].any()
