"""Lambertian shading under 9-term real spherical-harmonic lighting, light
estimation, the shading loss and Laplacian smoothness terms.

Basis order: (1, y, z, x, xy, yz, 3z²-1, xz, x²-y²).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

C0 = 0.282095
C1 = 0.488603
C2 = 1.092548
C3 = 0.315392
C4 = 0.546274


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SHLight:
    coeffs: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64).reshape(9)
        if not np.all(np.isfinite(c)):
            raise ValueError("SH coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def ambient(cls, level: float = 1.0) -> "SHLight":
        """Light whose shading term equals ``level`` for every normal."""
        return cls(np.r_[level / C0, np.zeros(8)])

    def to_list(self) -> list:
        return [float(x) for x in self.coeffs]


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Real SH basis values (..., 9) for (renormalized) normals (..., 3)."""
    n = np.asarray(normals, dtype=np.float64)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero-length normal")
    n = n / norm
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, C0),
        C1 * y, C1 * z, C1 * x,
        C2 * x * y, C2 * y * z, C3 * (3 * z * z - 1), C2 * x * z, C4 * (x * x - y * y),
    ], axis=-1)


def sh_basis_jacobian(normals: np.ndarray) -> np.ndarray:
    """d(basis)/d(n) for unit normals, shape (..., 9, 3)."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    zero = np.zeros_like(x)
    c1 = np.full_like(x, C1)
    rows = [
        (zero, zero, zero),
        (zero, c1, zero),
        (zero, zero, c1),
        (c1, zero, zero),
        (C2 * y, C2 * x, zero),
        (zero, C2 * z, C2 * y),
        (zero, zero, 6 * C3 * z),
        (C2 * z, zero, C2 * x),
        (2 * C4 * x, -2 * C4 * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def shading_term(light: SHLight, normals: np.ndarray) -> np.ndarray:
    return sh_basis(normals) @ light.coeffs


def shade(albedo, normal, light: SHLight) -> np.ndarray:
    """Per-channel albedo times SH irradiance, clamped to [0, 1]."""
    s = shading_term(light, normal)
    return np.clip(np.asarray(albedo, dtype=np.float64) * np.asarray(s)[..., None], 0.0, 1.0)


def render_view(mesh, camera, light: SHLight):
    """Shaded image (background 0), hard coverage mask and the attribute maps."""
    from .raster import rasterize

    maps = rasterize(mesh, camera, antialias=False)
    img = np.zeros(maps.shape + (3,))
    cov = maps.covered
    if mesh.vertex_albedo is not None and cov.any():
        img[cov] = shade(maps.albedo[cov], maps.normal[cov], light)
    return img, cov, maps


def _valid_pixels(normal_map, mask):
    m = np.asarray(mask) > 0.5
    n = np.asarray(normal_map)
    return m & np.all(np.isfinite(n), axis=-1) & (np.linalg.norm(n, axis=-1) > 0)


def estimate_light(normal_map: np.ndarray, gray: np.ndarray, mask: np.ndarray,
                   rank_tol: float = 1e-10) -> SHLight:
    """Least-squares SH coefficients fitting gray values from normals.

    Solves the 9×9 normal equations; if the system is rank deficient the
    minimal-norm solution is returned and the light is flagged degenerate.
    """
    valid = _valid_pixels(normal_map, mask)
    if valid.sum() < 9:
        raise InsufficientDataError(f"need at least 9 valid pixels, got {int(valid.sum())}")
    Y = sh_basis(normal_map[valid])
    g = np.asarray(gray, dtype=np.float64)[valid]
    ata = Y.T @ Y
    atb = Y.T @ g
    eig = np.linalg.eigvalsh(ata)
    if eig[0] <= rank_tol * max(eig[-1], 1e-300):
        log.warning("light estimation is rank deficient; returning minimal-norm solution")
        return SHLight(np.linalg.lstsq(Y, g, rcond=None)[0], degenerate=True)
    return SHLight(np.linalg.solve(ata, atb))


def sfs_loss(albedo_map, normal_map, light: SHLight, image, mask, return_grad: bool = False):
    """Mean absolute difference between albedo × shading and the image over
    valid pixels and channels. With ``return_grad`` also returns gradients
    w.r.t. the albedo and normal maps."""
    valid = _valid_pixels(normal_map, mask)
    nvalid = int(valid.sum())
    A = np.asarray(albedo_map, dtype=np.float64)
    N = np.asarray(normal_map, dtype=np.float64)
    if nvalid == 0:
        log.warning("sfs_loss: no valid pixels")
        return (0.0, np.zeros_like(A), np.zeros_like(N)) if return_grad else 0.0
    n = N[valid]
    s = sh_basis(n) @ light.coeffs
    r = A[valid] * s[:, None] - np.asarray(image, dtype=np.float64)[valid]
    denom = 3.0 * nvalid
    loss = float(np.abs(r).sum() / denom)
    if not return_grad:
        return loss
    sg = np.sign(r) / denom
    gA = np.zeros_like(A)
    gA[valid] = sg * s[:, None]
    g_s = (sg * A[valid]).sum(axis=1)
    nn = n / np.linalg.norm(n, axis=1, keepdims=True)
    gN = np.zeros_like(N)
    gN[valid] = g_s[:, None] * np.einsum("k,pkd->pd", light.coeffs, sh_basis_jacobian(nn))
    return loss, gA, gN


def uniform_laplacian(n_vertices: int, faces: np.ndarray) -> sp.csr_matrix:
    """Umbrella operator: row i is x_i minus the mean of its edge neighbors.
    Isolated vertices get an all-zero row."""
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    i = np.concatenate([e[:, 0], e[:, 1]])
    j = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(n_vertices, n_vertices))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if np.any(deg == 0):
        log.warning("%d isolated vertices contribute nothing to the Laplacian", int((deg == 0).sum()))
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    return (sp.diags((deg > 0).astype(np.float64)) - sp.diags(inv) @ adj).tocsr()


def laplacian_reg(mesh, attribute: np.ndarray, return_grad: bool = False):
    """Mean over vertices of the L1 norm of the Laplacian of ``attribute``.

    ``mesh`` is a TriMesh or a precomputed :func:`uniform_laplacian` matrix.
    """
    L = mesh if sp.issparse(mesh) else uniform_laplacian(mesh.n_vertices, mesh.faces)
    x = np.asarray(attribute, dtype=np.float64)
    lx = L @ x
    loss = float(np.abs(lx).sum() / len(x))
    if not return_grad:
        return loss
    return loss, L.T @ (np.sign(lx) / len(x))
