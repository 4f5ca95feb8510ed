import numpy as np
import pytest

from mvsfs.dpsr import (IndicatorGrid, VectorGrid, _apply_solve, _apply_solve_adjoint, dpsr,
                        dpsr_adjoint, solve_indicator, splat)
from mvsfs.scene import OrientedPointCloud

UNIT = np.array([[-1.0] * 3, [1.0] * 3])


def _sphere_points(n, radius, rng, center=(0, 0, 0)):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return OrientedPointCloud(np.asarray(center) + radius * d, d)


def _cloud(pos, nrm):
    return OrientedPointCloud(np.asarray(pos, float), np.asarray(nrm, float))


def test_splat_point_on_node():
    bounds = np.array([[0.0] * 3, [8.0] * 3])
    pts = _cloud([[2, 3, 4]] * 4, [[0, 0, 1]] * 4)
    v = splat(pts, 8, bounds).values
    assert np.array_equal(v[2, 3, 4], [0, 0, 4])
    v[2, 3, 4] = 0
    assert not v.any()


def test_splat_cell_center_spreads_evenly():
    bounds = np.array([[0.0] * 3, [8.0] * 3])
    pts = _cloud([[2.5, 3.5, 4.5]] + [[1, 1, 1]] * 3, [[0, 0, 1]] + [[1, 0, 0]] * 3)
    v = splat(pts, 8, bounds).values
    assert np.allclose(v[2:4, 3:5, 4:6, 2], 1 / 8)


def test_splat_partition_of_unity(rng):
    pts = _sphere_points(500, 0.5, rng)
    v = splat(pts, 32, UNIT).values
    assert np.allclose(v.reshape(-1, 3).sum(0), pts.normals.sum(0), atol=1e-10)


def test_zero_field_gives_zero_indicator():
    chi = solve_indicator(VectorGrid(np.zeros((16, 16, 16, 3)), UNIT))
    assert not chi.values.any()


def test_sphere_sign_against_brute_force(rng):
    pts = _sphere_points(2000, 0.3, rng)
    bounds = np.array([[-0.5] * 3, [0.5] * 3])
    grid = dpsr(pts, 64, bounds, sig=4.0)
    h = 1.0 / 64
    i = np.arange(64)
    X, Y, Z = np.meshgrid(i, i, i, indexing="ij")
    nodes = bounds[0] + h * np.stack([X, Y, Z], -1)
    r = np.linalg.norm(nodes, axis=-1)
    far = np.abs(r - 0.3) > 2 * h
    truth = r < 0.3
    correct = (grid.values > 0) == truth
    assert correct[far].mean() >= 0.99


def test_box_sign_against_brute_force(rng):
    # points on the faces of an axis-aligned box with outward normals
    n = 3000
    face = rng.integers(0, 6, n)
    p = rng.uniform(-0.25, 0.25, (n, 3))
    axis, sign = face // 2, np.where(face % 2, 1.0, -1.0)
    p[np.arange(n), axis] = 0.25 * sign
    nrm = np.zeros((n, 3))
    nrm[np.arange(n), axis] = sign
    grid = dpsr(_cloud(p, nrm), 64, np.array([[-0.5] * 3, [0.5] * 3]), sig=2.0)
    h = 1.0 / 64
    i = np.arange(64)
    nodes = -0.5 + h * np.stack(np.meshgrid(i, i, i, indexing="ij"), -1)
    d = np.abs(nodes).max(axis=-1)
    far = np.abs(d - 0.25) > 2 * h
    assert ((grid.values > 0) == (d < 0.25))[far].mean() >= 0.99


def test_offset_puts_points_on_zero_level(rng):
    pts = _sphere_points(800, 0.4, rng)
    grid = dpsr(pts, 32, UNIT)
    assert abs(grid.sample(pts.positions).mean()) < 1e-6


def test_flipping_normals_negates(rng):
    pts = _sphere_points(300, 0.4, rng)
    a = dpsr(pts, 32, UNIT).values
    b = dpsr(OrientedPointCloud(pts.positions, -pts.normals), 32, UNIT).values
    assert np.allclose(a, -b, rtol=0, atol=1e-15)


def test_solve_is_linear(rng):
    v1, v2 = rng.normal(size=(2, 16, 16, 16, 3))
    lhs = _apply_solve(2 * v1 - 3 * v2, 4.0)
    assert np.allclose(lhs, 2 * _apply_solve(v1, 4.0) - 3 * _apply_solve(v2, 4.0), atol=1e-12)


def test_solve_adjoint_identity(rng):
    v = rng.normal(size=(16, 16, 16, 3))
    g = rng.normal(size=(16, 16, 16))
    lhs = np.sum(_apply_solve(v, 2.0) * g)
    rhs = np.sum(v * _apply_solve_adjoint(g, 2.0))
    assert abs(lhs - rhs) <= 1e-6 * abs(lhs)


def test_adjoint_zero_gradient(rng):
    pts = _sphere_points(50, 0.4, rng)
    grid = dpsr(pts, 16, UNIT)
    gp, gn = dpsr_adjoint(np.zeros((16,) * 3), pts, grid)
    assert not gp.any() and not gn.any()


def test_adjoint_rejects_wrong_shape(rng):
    pts = _sphere_points(50, 0.4, rng)
    grid = dpsr(pts, 16, UNIT)
    with pytest.raises(ValueError):
        dpsr_adjoint(np.zeros((8,) * 3), pts, grid)


def test_adjoint_matches_finite_differences(rng):
    pos = rng.uniform(-0.6, 0.6, (8, 3))
    nrm = rng.normal(size=(8, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    g = rng.normal(size=(16, 16, 16))
    sig = 1.0

    def f(p, n):
        return float(np.sum(dpsr(_cloud(p, n), 16, UNIT, sig).values * g))

    grid = dpsr(_cloud(pos, nrm), 16, UNIT, sig)
    gp, gn = dpsr_adjoint(g, _cloud(pos, nrm), grid, sig)
    step = 1e-4 * 2.0
    dp = rng.normal(size=(8, 3))
    fd = (f(pos + step * dp, nrm) - f(pos - step * dp, nrm)) / (2 * step)
    assert abs(fd - np.sum(gp * dp)) <= 1e-4 * abs(fd)
    # normals enter linearly; perturb without renormalizing through the raw splat/solve
    dn = rng.normal(size=(8, 3))
    eps = 1e-3
    from mvsfs.dpsr import _trilinear

    def f_raw(n):
        idx, w, _, _ = _trilinear(pos, UNIT, 16)
        v = np.zeros((16**3, 3))
        for d in range(3):
            v[:, d] = np.bincount(idx.ravel(), (w * n[:, d:d + 1]).ravel(), minlength=16**3)
        chi = _apply_solve(v.reshape(16, 16, 16, 3), sig)
        chi -= IndicatorGrid(chi, UNIT).sample(pos).mean()
        return float(np.sum(chi * g))

    fdn = (f_raw(nrm + eps * dn) - f_raw(nrm - eps * dn)) / (2 * eps)
    assert abs(fdn - np.sum(gn * dn)) <= 1e-6 * abs(fdn)


def test_adjoint_translation_equivariance(rng):
    res = 16
    h = 2.0 / res
    pos = rng.uniform(-0.5, 0.4, (20, 3))
    nrm = rng.normal(size=(20, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    g = rng.normal(size=(res,) * 3)
    a = _cloud(pos, nrm)
    b = _cloud(pos + np.array([h, 0, 0]), nrm)
    ga = dpsr(a, res, UNIT)
    gb = dpsr(b, res, UNIT)
    assert np.allclose(np.roll(ga.values, 1, axis=0), gb.values, atol=1e-12)
    pa, na = dpsr_adjoint(g, a, ga)
    pb, nb = dpsr_adjoint(np.roll(g, 1, axis=0), b, gb)
    assert np.allclose(pa, pb, atol=1e-9) and np.allclose(na, nb, atol=1e-9)
