"""Mesh-based patch warping and the occlusion-gated NCC consistency loss.

Every reference patch pixel carries its own rendered 3D position, so the
warp into a source view follows the actual surface instead of a plane
through the patch center. The plane-based warp is kept as an option for
comparison (``point_based=True``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .raster import AttributeMaps
from .scene import Camera

log = logging.getLogger(__name__)

NCC_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class Patch:
    center: tuple          # (u, v) pixel coordinates in the reference view
    size: int
    valid: np.ndarray      # k×k, reference pixel covered and inside the image

    @property
    def offsets(self) -> np.ndarray:
        r = self.size // 2
        dv, du = np.mgrid[-r:r + 1, -r:r + 1]
        return np.stack([du, dv], axis=-1)

    @property
    def pixels(self) -> np.ndarray:
        """k×k×2 integer (u, v) coordinates."""
        return self.offsets + np.array(self.center)


def sample_patches(maps_ref: AttributeMaps, count: int, patch_size: int, seed) -> list[Patch]:
    """Patch centers drawn uniformly without replacement from covered pixels
    at least ceil(k/2) pixels from the image border."""
    if patch_size % 2 != 1:
        raise ValueError("patch_size must be odd")
    H, W = maps_ref.shape
    margin = math.ceil(patch_size / 2)
    cov = maps_ref.covered
    elig = np.zeros_like(cov)
    elig[margin:H - margin, margin:W - margin] = cov[margin:H - margin, margin:W - margin]
    idx = np.flatnonzero(elig)
    if len(idx) == 0:
        log.warning("no covered pixels to sample patches from")
        return []
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(idx, size=min(count, len(idx)), replace=False))
    r = patch_size // 2
    out = []
    for flat in chosen:
        v, u = divmod(int(flat), W)
        valid = cov[v - r:v + r + 1, u - r:u + r + 1].copy()
        out.append(Patch((u, v), patch_size, valid))
    return out


def relative_transform(cam_ref: Camera, cam_src: Camera):
    """Rotation and translation taking reference camera coordinates to source camera coordinates."""
    R = cam_src.R @ cam_ref.R.T
    t = cam_src.t - R @ cam_ref.t
    return R, t


def warp_points(points_ref: np.ndarray, cam_ref: Camera, cam_src: Camera):
    """Move reference camera-frame points into the source frame and project.

    Returns ``(src_coords (...,2), src_cam_points (...,3), in_front (...))``.
    """
    R, t = relative_transform(cam_ref, cam_src)
    ps = points_ref @ R.T + t
    h = ps @ cam_src.K.T
    z = ps[..., 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[..., :2] / h[..., 2:3]
    uv = np.where(front[..., None], uv, np.nan)
    return uv, ps, front


def patch_points(patch: Patch, maps_ref: AttributeMaps) -> np.ndarray:
    pix = patch.pixels
    return maps_ref.position[pix[..., 1], pix[..., 0]]


def plane_points(patch: Patch, maps_ref: AttributeMaps, cam_ref: Camera) -> np.ndarray:
    """Patch pixels back-projected onto the plane through the center pixel's
    3D point with the center pixel's normal (point-based warping)."""
    u, v = patch.center
    x0 = maps_ref.position[v, u]
    n = cam_ref.R @ maps_ref.normal[v, u]
    pix = patch.pixels.astype(np.float64)
    rays = np.concatenate([pix, np.ones(pix.shape[:2] + (1,))], axis=-1) @ cam_ref.K_inv.T
    denom = rays @ n
    denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    return rays * ((n @ x0) / denom)[..., None]


def warp_patch(patch: Patch, maps_ref: AttributeMaps, cam_ref: Camera, cam_src: Camera,
               point_based: bool = False):
    """Source-view pixel coordinates (k×k×2) and source camera-frame points
    (k×k×3) of a reference patch. Pixels landing behind the source camera
    get NaN coordinates."""
    pts = plane_points(patch, maps_ref, cam_ref) if point_based else patch_points(patch, maps_ref)
    uv, ps, _ = warp_points(pts, cam_ref, cam_src)
    return uv, ps


def bilinear(image: np.ndarray, coords: np.ndarray, with_grad: bool = False):
    """Bilinear lookup at (u, v) coordinates (..., 2).

    Returns ``(values, valid)`` and, with ``with_grad``, also the derivatives
    d value/du and d value/dv. Coordinates outside [0, W-1] × [0, H-1] (or
    non-finite) are invalid and yield 0.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    H, W, C = img.shape
    c = np.asarray(coords, dtype=np.float64)
    u, v = c[..., 0], c[..., 1]
    valid = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uu = np.where(valid, u, 0.0)
    vv = np.where(valid, v, 0.0)
    x0 = np.clip(np.floor(uu).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(vv).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (uu - x0)[..., None]
    fy = (vv - y0)[..., None]
    i00, i01, i10, i11 = img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]
    with np.errstate(invalid="ignore"):
        top = i00 + fx * (i01 - i00)
        bot = i10 + fx * (i11 - i10)
        val = top + fy * (bot - top)
    val = np.where(valid[..., None], val, 0.0)
    if squeeze:
        val = val[..., 0]
    if not with_grad:
        return val, valid
    with np.errstate(invalid="ignore"):
        du = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
        dv = bot - top
    du = np.where(valid[..., None], du, 0.0)
    dv = np.where(valid[..., None], dv, 0.0)
    if squeeze:
        du, dv = du[..., 0], dv[..., 0]
    return val, valid, du, dv


def ncc(a, b, valid=None, eps: float = NCC_EPS) -> float:
    """Normalized cross-correlation over mutually valid entries; NaN if fewer than 2.

    Covariance and variances are sums over the valid entries, and ``eps`` is
    added under the square root.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    m = np.ones(a.shape, bool) if valid is None else np.asarray(valid, bool).ravel()
    if m.sum() < 2:
        return float("nan")
    a, b = a[m] - a[m].mean(), b[m] - b[m].mean()
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum() + eps))


def _batched_ncc(a, b, m, eps=NCC_EPS):
    """NCC per row of (P, n) arrays over mask m, plus d ncc / d b."""
    cnt = np.maximum(m.sum(axis=1, keepdims=True), 1)
    am = np.where(m, a - (a * m).sum(1, keepdims=True) / cnt, 0.0)
    bm = np.where(m, b - (b * m).sum(1, keepdims=True) / cnt, 0.0)
    cov = (am * bm).sum(1)
    va = (am * am).sum(1)
    vb = (bm * bm).sum(1)
    s = np.sqrt(va * vb + eps)
    score = cov / s
    dscore = am / s[:, None] - (cov * va / s**3)[:, None] * bm
    return score, np.where(m, dscore, 0.0)


@dataclass
class NCCResult:
    loss: float
    grad_position: np.ndarray      # H×W×3 gradient w.r.t. the reference position map
    n_pairs: int                   # contributing (patch, source) pairs
    n_candidates: int
    scores: np.ndarray             # NCC per (patch, source), NaN where undefined
    contributing: np.ndarray       # bool per (patch, source): passed both gates


def ncc_loss(patches: list, maps_ref: AttributeMaps, gray_ref: np.ndarray, cam_ref: Camera,
             sources: list, delta_ncc: float = 0.5, delta_d: float = 0.01,
             point_based: bool = False) -> NCCResult:
    """Mean of 1 - NCC over gated (patch, source) pairs.

    ``sources`` is a list of ``(gray_src, depth_src, cam_src)`` with the
    rendered source depth map. A pair counts only if at least half of the
    patch's valid (covered, in-image) pixels pass the depth test |z_reprojected - D_src| < delta_d and
    the NCC over the passing pixels exceeds ``delta_ncc``. The gates are
    constants for the gradient, which flows only through the warped source
    coordinates into the reference position map.
    """
    H, W = maps_ref.shape
    grad = np.zeros((H, W, 3))
    if not patches or not sources:
        empty = (len(patches), len(sources))
        return NCCResult(0.0, grad, 0, 0, np.full(empty, np.nan), np.zeros(empty, bool))
    k = patches[0].size
    n = k * k
    pix = np.stack([p.pixels for p in patches]).reshape(len(patches), n, 2)
    ref_valid = np.stack([p.valid for p in patches]).reshape(len(patches), n)
    a = gray_ref[pix[..., 1], pix[..., 0]]
    if point_based:
        pts = np.stack([plane_points(p, maps_ref, cam_ref) for p in patches]).reshape(len(patches), n, 3)
        centers = np.array([p.center for p in patches])
        rays = np.concatenate([pix.astype(np.float64), np.ones(pix.shape[:2] + (1,))], axis=-1) @ cam_ref.K_inv.T
        nrm = maps_ref.normal[centers[:, 1], centers[:, 0]] @ cam_ref.R.T
    else:
        pts = maps_ref.position[pix[..., 1], pix[..., 0]]

    total, n_pairs = 0.0, 0
    scores = np.full((len(patches), len(sources)), np.nan)
    contributing = np.zeros(scores.shape, bool)
    g_pts = np.zeros_like(pts)
    contributions = []
    for s_idx, (gray_src, depth_src, cam_src) in enumerate(sources):
        uv, ps, front = warp_points(pts, cam_ref, cam_src)
        b, in_img, du, dv = bilinear(gray_src, uv, with_grad=True)
        d_src, d_ok = bilinear(np.where(np.isfinite(depth_src), depth_src, 1e30), uv)
        valid = ref_valid & front & in_img
        depth_ok = valid & d_ok & (np.abs(ps[..., 2] - d_src) < delta_d)
        gate_depth = depth_ok.sum(1) >= 0.5 * ref_valid.sum(1)
        score, dscore = _batched_ncc(a, b, depth_ok)
        defined = depth_ok.sum(1) >= 2
        scores[defined, s_idx] = score[defined]
        use = gate_depth & defined & (score > delta_ncc)
        contributing[:, s_idx] = use
        if not use.any():
            continue
        total += float((1.0 - score[use]).sum())
        n_pairs += int(use.sum())
        contributions.append((use, dscore, du, dv, ps, cam_src))
    if n_pairs == 0:
        return NCCResult(0.0, grad, 0, len(patches) * len(sources), scores, contributing)
    for use, dscore, du, dv, ps, cam_src in contributions:
        # d loss / d b = -(d ncc / d b) / n_pairs
        gb = -dscore[use] / n_pairs
        g_uv = np.stack([gb * du[use], gb * dv[use]], axis=-1)
        Rrel, _ = relative_transform(cam_ref, cam_src)
        p = ps[use]
        K = cam_src.K
        hz = p @ K[2]
        uvs = (p @ K.T)[..., :2] / hz[..., None]
        J0 = (K[0] - uvs[..., :1] * K[2]) / hz[..., None]
        J1 = (K[1] - uvs[..., 1:] * K[2]) / hz[..., None]
        g_ps = g_uv[..., :1] * J0 + g_uv[..., 1:] * J1
        g_pts[use] += g_ps @ Rrel
    if point_based:
        # every plane point depends on the center point: X_p = r_p (n·X_c)/(n·r_p)
        denom = np.einsum("pnd,pd->pn", rays, nrm)
        denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
        coef = np.einsum("pnd,pnd->pn", g_pts, rays) / denom
        g_center = coef.sum(1)[:, None] * nrm
        np.add.at(grad, (centers[:, 1], centers[:, 0]), g_center)
    else:
        np.add.at(grad, (pix[..., 1].ravel(), pix[..., 0].ravel()), g_pts.reshape(-1, 3))
    return NCCResult(total / n_pairs, grad, n_pairs, len(patches) * len(sources), scores, contributing)
