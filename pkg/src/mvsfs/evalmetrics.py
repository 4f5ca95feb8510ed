"""Surface and image metrics: symmetric Chamfer-L1, normal error and PSNR."""

from __future__ import annotations

import json
import logging

import numpy as np
from scipy.spatial import cKDTree

from .scene import SceneError, TriMesh, face_normals

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
DEFAULT_SAMPLES = 100_000
# candidate faces per query when searching for the closest surface point
CANDIDATES = 16


def sample_surface(mesh: TriMesh, count: int, seed):
    """Area-weighted surface samples: (points, unit face normals, face ids)."""
    if mesh.n_faces == 0:
        raise SceneError("mesh has no faces")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise SceneError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    fid = rng.choice(mesh.n_faces, size=count, p=areas / total)
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    pts = np.einsum("nk,nkd->nd", w, mesh.vertices[mesh.faces[fid]])
    return pts, face_normals(mesh.vertices, mesh.faces)[fid], fid


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to query points p, all N×3."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(sel, val):
        sel = sel & ~done
        out[sel] = val[sel]
        done[sel] = True

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    put((d6 >= 0) & (d5 <= d6), c)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def point_to_mesh(points: np.ndarray, mesh: TriMesh):
    """Distance from each point to the mesh surface and the id of the closest face.

    Candidates are the faces whose centroids are nearest to the query; this
    is exact whenever the closest face is among them, which holds for the
    fairly uniform meshes handled here.
    """
    tri = mesh.vertices[mesh.faces]
    tree = cKDTree(tri.mean(axis=1))
    k = min(CANDIDATES, mesh.n_faces)
    _, cand = tree.query(points, k=k)
    cand = cand.reshape(len(points), k)
    best = np.full(len(points), np.inf)
    best_f = np.zeros(len(points), dtype=np.int64)
    for j in range(k):
        f = cand[:, j]
        q = closest_point_on_triangles(points, tri[f, 0], tri[f, 1], tri[f, 2])
        d = np.linalg.norm(points - q, axis=1)
        better = d < best
        best[better] = d[better]
        best_f[better] = f[better]
    return best, best_f


def _directed(mesh_a, mesh_b, samples, seed):
    pts, nrm, _ = sample_surface(mesh_a, samples, seed)
    d, f = point_to_mesh(pts, mesh_b)
    nb = face_normals(mesh_b.vertices, mesh_b.faces)[f]
    return d, np.abs(np.einsum("ij,ij->i", nrm, nb))


def chamfer_l1(mesh_a: TriMesh, mesh_b: TriMesh, samples: int = DEFAULT_SAMPLES, seed=0) -> float:
    """Average of the two directed mean point-to-surface distances."""
    da, _ = _directed(mesh_a, mesh_b, samples, seed)
    db, _ = _directed(mesh_b, mesh_a, samples, seed)
    return float(0.5 * (da.mean() + db.mean()))


def normal_error(mesh_a: TriMesh, mesh_b: TriMesh, samples: int = DEFAULT_SAMPLES, seed=0) -> float:
    """Mean of 1 - |cos| between each sample's face normal and the normal of
    the closest face on the other mesh, averaged over both directions."""
    _, ca = _directed(mesh_a, mesh_b, samples, seed)
    _, cb = _directed(mesh_b, mesh_a, samples, seed)
    return float(np.clip(0.5 * ((1 - ca).mean() + (1 - cb).mean()), 0.0, 1.0))


def psnr(img_a: np.ndarray, img_b: np.ndarray, mask=None) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images over ``mask``;
    identical inputs give the 99 dB cap."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = np.ones(a.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty mask")
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(-10 * np.log10(mse))


def report(mesh: TriMesh, gt: TriMesh, samples: int = DEFAULT_SAMPLES, seed=0, extra: dict | None = None) -> dict:
    out = {
        "chamfer_l1": {"value": chamfer_l1(mesh, gt, samples, seed), "samples": samples, "seed": seed},
        "normal_error": {"value": normal_error(mesh, gt, samples, seed), "samples": samples, "seed": seed},
    }
    if extra:
        out.update(extra)
    return out


def write_report(path, data: dict) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
