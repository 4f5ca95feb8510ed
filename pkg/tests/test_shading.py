import numpy as np
import pytest

from conftest import simple_camera
from mvsfs.raster import raster_adjoint, rasterize
from mvsfs.scene import TriMesh
from mvsfs.shading import (InsufficientDataError, SHLight, estimate_light, laplacian_reg, sfs_loss, sh_basis,
                           shade, uniform_laplacian)
from mvsfs.synthetic import DEFAULT_LIGHT, icosphere


def _unit(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_basis_at_poles():
    assert np.allclose(sh_basis(np.array([0, 0, 1.0])),
                       [0.282095, 0, 0.488603, 0, 0, 0, 0.630784, 0, 0], atol=1e-6)
    y = sh_basis(np.array([1.0, 0, 0]))
    assert np.allclose(y[4:], [0, 0, -0.315392, 0, 0.546274], atol=1e-6)
    assert np.allclose(y[1:4], [0, 0, 0.488603], atol=1e-6)


def test_basis_parity(rng):
    n = _unit(100, rng)
    a, b = sh_basis(n), sh_basis(-n)
    assert np.allclose(a[:, [0, 4, 5, 6, 7, 8]], b[:, [0, 4, 5, 6, 7, 8]])
    assert np.allclose(a[:, 1:4], -b[:, 1:4])


def test_basis_renormalizes_and_rejects_zero():
    assert np.allclose(sh_basis(np.array([0, 0, 3.0])), sh_basis(np.array([0, 0, 1.0])))
    with pytest.raises(ValueError):
        sh_basis(np.zeros(3))


def test_basis_orthonormal_on_sphere():
    n = _unit(1_000_000, np.random.default_rng(0))
    Y = sh_basis(n)
    gram = 4 * np.pi * (Y.T @ Y) / len(n)
    assert np.abs(gram - np.eye(9)).max() < 1e-2


def _sphere_normal_map():
    ico = icosphere(4)
    mesh = TriMesh(0.5 * ico.vertices + [0, 0, 3], ico.faces)
    maps = rasterize(mesh, simple_camera())
    return maps.normal, maps.covered


def test_light_recovery_noiseless():
    nmap, mask = _sphere_normal_map()
    # visible hemisphere normals still span the basis
    truth = SHLight(DEFAULT_LIGHT)
    gray = np.where(mask, sh_basis(np.where(mask[..., None], nmap, 1.0)) @ truth.coeffs, 0.0)
    est = estimate_light(nmap, gray, mask)
    assert not est.degenerate
    assert np.abs(est.coeffs - truth.coeffs).max() < 1e-6


def test_constant_gray_is_ambient(rng):
    n = _unit(20000, rng)
    nmap = n.reshape(100, 200, 3)
    est = estimate_light(nmap, np.full((100, 200), 0.7), np.ones((100, 200)))
    assert np.abs(est.coeffs - np.r_[0.7 / 0.282095, np.zeros(8)]).max() < 1e-5


def test_identical_normals_are_degenerate():
    nmap = np.tile([0.0, 0.0, 1.0], (10, 10, 1))
    est = estimate_light(nmap, np.full((10, 10), 0.5), np.ones((10, 10)))
    assert est.degenerate


def test_too_few_pixels():
    mask = np.zeros((10, 10))
    mask[0, :5] = 1
    with pytest.raises(InsufficientDataError):
        estimate_light(np.tile([0.0, 0.0, 1.0], (10, 10, 1)), np.zeros((10, 10)), mask)


def test_estimate_is_least_squares_optimal(rng):
    nmap, mask = _sphere_normal_map()
    gray = np.clip(rng.normal(0.5, 0.2, mask.shape), 0, 1)
    est = estimate_light(nmap, gray, mask)
    Y = sh_basis(nmap[mask])

    def residual(c):
        return np.sum((Y @ c - gray[mask]) ** 2)

    best = residual(est.coeffs)
    for _ in range(100):
        assert best <= residual(est.coeffs + rng.normal(scale=0.1, size=9))
        assert best <= residual(rng.normal(size=9))


def test_shade_examples():
    amb = SHLight.ambient()
    assert np.allclose(amb.coeffs[0], 1 / 0.282095, rtol=1e-6)
    assert np.allclose(shade(np.full(3, 0.5), np.array([0.3, -0.2, 0.9]), amb), 0.5)
    assert not shade(np.zeros(3), np.array([0, 0, 1.0]), SHLight(DEFAULT_LIGHT)).any()
    light = SHLight([1.0, 0, 0.5, 0, 0, 0, 0, 0, 0])
    theta = np.linspace(0, np.pi, 50)
    normals = np.stack([np.sin(theta), np.zeros_like(theta), np.cos(theta)], 1)[::-1]  # n_z increasing
    values = shade(np.full((50, 3), 0.5), normals, light)[:, 0]
    assert np.all(np.diff(values) > 0)


def test_sfs_examples():
    n = np.zeros((1, 1, 3))
    n[..., 2] = 1
    amb = SHLight.ambient()
    assert abs(sfs_loss(np.full((1, 1, 3), 0.5), n, amb, np.full((1, 1, 3), 0.4), np.ones((1, 1))) - 0.1) < 1e-12
    nmap, mask = _sphere_normal_map()
    light = SHLight(DEFAULT_LIGHT)
    albedo = np.where(mask[..., None], 0.4, 0.0)
    img = np.zeros_like(albedo)
    img[mask] = albedo[mask] * (sh_basis(nmap[mask]) @ light.coeffs)[:, None]
    assert sfs_loss(albedo, nmap, light, img, mask) == 0.0
    assert sfs_loss(albedo, nmap, light, img, np.zeros_like(mask)) == 0.0


def test_sfs_scale_ambiguity(rng):
    nmap, mask = _sphere_normal_map()
    albedo = rng.uniform(0.2, 0.5, nmap.shape)
    img = rng.uniform(0, 1, nmap.shape)
    light = SHLight(DEFAULT_LIGHT)
    a = sfs_loss(albedo, nmap, light, img, mask)
    b = sfs_loss(2 * albedo, nmap, SHLight(light.coeffs / 2), img, mask)
    assert abs(a - b) < 1e-12


def test_sfs_gradient_wrt_vertex_albedo(rng):
    v = np.array([[-0.6, -0.5, 2.0], [0.6, -0.5, 2.2], [0.0, 0.6, 1.9], [0.7, 0.6, 2.1]])
    f = np.array([[0, 1, 2], [1, 3, 2], [0, 2, 3]])[:3]
    albedo = rng.uniform(0.3, 0.7, (4, 3))
    cam = simple_camera()
    light = SHLight(DEFAULT_LIGHT)
    mesh = TriMesh(v, f, vertex_albedo=albedo)
    maps = rasterize(mesh, cam, antialias=False)
    img = rng.uniform(0, 1, maps.albedo.shape)
    _, gA, _ = sfs_loss(maps.albedo, maps.normal, light, img, maps.covered, return_grad=True)
    _, ga = raster_adjoint({"albedo": gA}, mesh, cam, maps)

    def loss(alb):
        m = rasterize(TriMesh(v, f, vertex_albedo=alb), cam, antialias=False)
        return sfs_loss(m.albedo, m.normal, light, img, m.covered)

    eps = 1e-7
    for i in range(4):
        for c in range(3):
            p, m = albedo.copy(), albedo.copy()
            p[i, c] += eps
            m[i, c] -= eps
            fd = (loss(p) - loss(m)) / (2 * eps)
            assert abs(fd - ga["albedo"][i, c]) < 1e-4


def test_sfs_normal_gradient_matches_fd(rng):
    nmap, mask = _sphere_normal_map()
    albedo = rng.uniform(0.2, 0.8, nmap.shape)
    img = rng.uniform(0, 1, nmap.shape)
    light = SHLight(DEFAULT_LIGHT)
    _, _, gN = sfs_loss(albedo, nmap, light, img, mask, return_grad=True)
    d = rng.normal(size=nmap.shape) * mask[..., None]
    # the basis renormalizes its input, so only tangential changes are visible;
    # the rasterizer adjoint applies that projection itself
    d -= nmap * np.sum(d * nmap, axis=-1, keepdims=True)
    eps = 1e-7
    fd = (sfs_loss(albedo, nmap + eps * d, light, img, mask) - sfs_loss(albedo, nmap - eps * d, light, img, mask)) / (2 * eps)
    assert abs(fd - np.sum(gN * d)) < 1e-4 * max(1.0, abs(fd))


def _grid(n=5):
    x, y = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float), indexing="ij")
    v = np.stack([x.ravel(), y.ravel(), np.zeros(n * n)], 1)
    idx = np.arange(n * n).reshape(n, n)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    # every quad is split along the same diagonal, so interior vertices have
    # six neighbors arranged symmetrically about them
    return TriMesh(v, np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])), idx


def test_laplacian_examples():
    mesh, idx = _grid()
    L = uniform_laplacian(mesh.n_vertices, mesh.faces)
    lx = L @ mesh.vertices
    interior = idx[1:-1, 1:-1].ravel()
    assert np.abs(lx[interior]).max() < 1e-12
    d = np.array([0.0, 0.0, 0.3])
    moved = mesh.vertices.copy()
    k = idx[2, 2]
    moved[k] += d
    assert np.allclose((L @ moved)[k], d)
    assert abs(np.abs((L @ moved)[k]).sum() - np.abs(d).sum()) < 1e-12
    assert laplacian_reg(mesh, np.full((mesh.n_vertices, 3), 0.4)) < 1e-15


def test_laplacian_isolated_vertex_contributes_nothing():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5.0]])
    L = uniform_laplacian(4, np.array([[0, 1, 2]]))
    assert not (L @ v)[3].any()


def test_laplacian_reg_gradient(rng):
    mesh, _ = _grid()
    x = rng.normal(size=(mesh.n_vertices, 3))
    _, g = laplacian_reg(mesh, x, return_grad=True)
    d = rng.normal(size=x.shape)
    eps = 1e-7
    fd = (laplacian_reg(mesh, x + eps * d) - laplacian_reg(mesh, x - eps * d)) / (2 * eps)
    assert abs(fd - np.sum(g * d)) < 1e-6
