"""Spectral Poisson reconstruction of an indicator field from oriented points,
with the exact adjoint back to point positions and normals.

Grids are periodic with ``res`` nodes per axis at ``bounds[0] + i * h``,
``h = (bounds[1] - bounds[0]) / res``. All spectral work happens in grid
index units, which makes ``sig`` a dimensionless smoothing degree.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .scene import OrientedPointCloud

log = logging.getLogger(__name__)

_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


@dataclass(frozen=True, eq=False)
class VectorGrid:
    values: np.ndarray   # res³×3
    bounds: np.ndarray
    n_clamped: int = 0

    @property
    def res(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class IndicatorGrid:
    """Indicator values χ (positive inside) after subtracting ``mean_offset``,
    the mean of the raw field at the input points."""

    values: np.ndarray
    bounds: np.ndarray
    mean_offset: float = 0.0

    @property
    def res(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / self.res

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.bounds[0], dtype=np.float64)

    def sample(self, points) -> np.ndarray:
        """Trilinear interpolation of χ at world points."""
        idx, w, _, _ = _trilinear(points, self.bounds, self.res)
        return np.einsum("nc,nc->n", self.values.reshape(-1)[idx], w)


def _check_res(res):
    if res < 2 or res & (res - 1):
        raise ValueError(f"grid resolution must be a power of two, got {res}")


def _trilinear(points, bounds, res):
    """Flat corner indices (N×8), weights (N×8), weight gradients w.r.t. world
    position (N×8×3) and the clamped mask for every point."""
    bounds = np.asarray(bounds, dtype=np.float64)
    h = (bounds[1] - bounds[0]) / res
    q = (np.asarray(points, dtype=np.float64) - bounds[0]) / h
    clamped = np.any((q < 0) | (q > res - 1), axis=1)
    qc = np.clip(q, 0, res - 1)
    base = np.minimum(np.floor(qc), res - 2).astype(np.int64)
    f = qc - base
    corner = base[:, None, :] + _CORNERS[None]
    idx = (corner[..., 0] * res + corner[..., 1]) * res + corner[..., 2]
    # per-axis factors: f for the +1 corner, (1 - f) for the base corner
    fac = np.where(_CORNERS[None] == 1, f[:, None, :], 1 - f[:, None, :])
    dfac = np.where(_CORNERS[None] == 1, 1.0, -1.0) * np.ones_like(fac)
    w = fac.prod(axis=2)
    dw = np.empty_like(fac)
    dw[..., 0] = dfac[..., 0] * fac[..., 1] * fac[..., 2]
    dw[..., 1] = fac[..., 0] * dfac[..., 1] * fac[..., 2]
    dw[..., 2] = fac[..., 0] * fac[..., 1] * dfac[..., 2]
    out_axis = (q < 0) | (q > res - 1)
    dw = dw / h * (~out_axis)[:, None, :]
    return idx, w, dw, clamped


def splat(points: OrientedPointCloud, res: int, bounds) -> VectorGrid:
    """Distribute each point normal onto its 8 surrounding nodes with trilinear weights."""
    _check_res(res)
    idx, w, _, clamped = _trilinear(points.positions, bounds, res)
    if clamped.any():
        log.warning("%d points outside the grid bounds were clamped", int(clamped.sum()))
    v = np.empty((res**3, 3))
    flat_idx = idx.ravel()
    for d in range(3):
        v[:, d] = np.bincount(flat_idx, weights=(w * points.normals[:, d:d + 1]).ravel(), minlength=res**3)
    return VectorGrid(v.reshape(res, res, res, 3), np.asarray(bounds, dtype=np.float64), int(clamped.sum()))


@lru_cache(maxsize=8)
def _spectral_operator(res: int, sig: float):
    """Per-axis multipliers H_d with χ̂ = Σ_d H_d v̂_d (positive inside for outward normals).

    H_d = i ω_d / |ω|² · exp(-2 sig² |k|² / res²), ω = 2π k / res; zero at k = 0
    and at Nyquist indices so the operator maps real fields to real fields."""
    k = np.fft.fftfreq(res, d=1.0 / res)
    kx, ky, kz = np.meshgrid(k, k, k, indexing="ij")
    kk = np.stack([kx, ky, kz])
    omega = 2 * np.pi * kk / res
    w2 = (omega**2).sum(0)
    k2 = (kk**2).sum(0)
    gauss = np.exp(-2.0 * sig**2 * k2 / res**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        base = np.where(w2 > 0, gauss / w2, 0.0)
    nyq = np.any(np.abs(kk) == res // 2, axis=0) if res % 2 == 0 else np.zeros_like(w2, bool)
    base[nyq] = 0.0
    H = 1j * omega * base[None]
    H.flags.writeable = False
    return H


def _apply_solve(v: np.ndarray, sig: float, workers: int = 1) -> np.ndarray:
    res = v.shape[0]
    H = _spectral_operator(res, float(sig))
    acc = np.zeros((res, res, res), dtype=np.complex128)
    for d in range(3):
        acc += H[d] * sfft.fftn(v[..., d], workers=workers)
    return sfft.ifftn(acc, workers=workers).real


def _apply_solve_adjoint(g: np.ndarray, sig: float, workers: int = 1) -> np.ndarray:
    res = g.shape[0]
    H = _spectral_operator(res, float(sig))
    G = sfft.fftn(g, workers=workers)
    out = np.empty((res, res, res, 3))
    for d in range(3):
        out[..., d] = sfft.ifftn(np.conj(H[d]) * G, workers=workers).real
    return out


def solve_indicator(v: VectorGrid, sig: float = 4.0, points: OrientedPointCloud | None = None,
                    workers: int = 1) -> IndicatorGrid:
    """Solve the periodic Poisson problem for χ from the splatted field ``v``.

    With ``points`` given, the mean of χ over the point positions is
    subtracted so the points lie on the zero level set on average.
    """
    if not np.all(np.isfinite(v.values)):
        raise ValueError("vector field contains non-finite values")
    chi = _apply_solve(v.values, sig, workers)
    offset = 0.0
    if points is not None:
        offset = float(IndicatorGrid(chi, v.bounds).sample(points.positions).mean())
        chi = chi - offset
    return IndicatorGrid(chi, v.bounds, offset)


def dpsr(points: OrientedPointCloud, res: int, bounds, sig: float = 4.0, workers: int = 1) -> IndicatorGrid:
    """Points → zero-offset indicator grid."""
    return solve_indicator(splat(points, res, bounds), sig, points, workers)


def dpsr_adjoint(grad_chi: np.ndarray, points: OrientedPointCloud, grid: IndicatorGrid,
                 sig: float = 4.0, workers: int = 1):
    """Gradients of a scalar loss w.r.t. point positions and normals, given
    its gradient w.r.t. the offset indicator values of ``grid = dpsr(points)``."""
    g = np.asarray(grad_chi, dtype=np.float64)
    res = grid.res
    if g.shape != (res, res, res):
        raise ValueError(f"grad_chi shape {g.shape} does not match grid res {res}")
    n = len(points)
    idx, w, dw, _ = _trilinear(points.positions, grid.bounds, res)
    # offset subtraction: chi' = chi - mean_j interp(chi, x_j)
    total = g.sum()
    g_chi = g.reshape(-1).copy()
    g_chi -= np.bincount(idx.ravel(), weights=(w * (total / n)).ravel(), minlength=res**3)
    chi_flat = grid.values.reshape(-1)
    grad_pos = -(total / n) * np.einsum("nc,ncd->nd", chi_flat[idx], dw)
    g_v = _apply_solve_adjoint(g_chi.reshape(res, res, res), sig, workers).reshape(-1, 3)
    gv_corner = g_v[idx]                     # N×8×3
    grad_nrm = np.einsum("nc,ncd->nd", w, gv_corner)
    proj = np.einsum("ncd,nd->nc", gv_corner, points.normals)
    grad_pos += np.einsum("nc,ncd->nd", proj, dw)
    return grad_pos, grad_nrm
