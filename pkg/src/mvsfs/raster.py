"""Software rasterizer for per-pixel silhouette, position, depth, normal and
albedo maps, with adjoints to vertex positions and vertex attributes.

Attributes are interpolated with perspective-correct barycentrics, which are
computed exactly as the barycentric coordinates of the ray/triangle hit in
the camera frame. Silhouettes are antialiased analytically on a one-pixel
band across visible silhouette edges, which is what gives them gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ._zbuffer import zbuffer
from .scene import Camera, TriMesh

NEAR = 1e-6
# relative depth slack when deciding whether a silhouette edge is the visible one
EDGE_DEPTH_TOL = 0.02


@dataclass(eq=False)
class AttributeMaps:
    silhouette: np.ndarray          # H×W in [0, 1], antialiased
    depth: np.ndarray               # H×W, +inf on background
    position: np.ndarray            # H×W×3 camera-frame positions, 0 on background
    normal: np.ndarray              # H×W×3 world-frame unit normals, 0 on background
    albedo: np.ndarray              # H×W×3, 0 on background
    face_id: np.ndarray             # H×W, -1 on background
    barycentric: np.ndarray         # H×W×3, 0 on background
    _aa: dict = field(default=None, repr=False)

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0

    @property
    def shape(self):
        return self.face_id.shape


@lru_cache(maxsize=4)
def _edge_topology_cached(key, faces_bytes, n_faces):
    faces = np.frombuffer(faces_bytes, dtype=np.int64).reshape(n_faces, 3)
    return _edge_topology(faces)


def _edge_topology(faces):
    """Unique edges (E×2) and their adjacent faces (E×2, -1 for a missing side)."""
    nf = len(faces)
    half = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    owner = np.tile(np.arange(nf), 3)
    lo, hi = half.min(1), half.max(1)
    nv = int(faces.max()) + 1 if nf else 0
    key = lo * nv + hi
    order = np.argsort(key, kind="stable")
    key_s = key[order]
    start = np.flatnonzero(np.r_[True, key_s[1:] != key_s[:-1]])
    counts = np.diff(np.r_[start, len(key_s)])
    edges = np.stack([lo[order][start], hi[order][start]], axis=1)
    adj = np.full((len(start), 2), -1, dtype=np.int64)
    adj[:, 0] = owner[order][start]
    two = counts >= 2
    adj[two, 1] = owner[order][start[two] + 1]
    return edges, adj


def edge_topology(faces: np.ndarray):
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    data = faces.tobytes()
    return _edge_topology_cached(hash(data), data, len(faces))


def _projection(camera: Camera, Xc: np.ndarray):
    h = Xc @ camera.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[:, :2] / h[:, 2:3]
    uv[~np.isfinite(uv)] = 0.0
    return uv


def _projection_jacobian(camera: Camera, Xc: np.ndarray, uv: np.ndarray):
    """d(u, v)/dX for camera-frame points, N×2×3."""
    K = camera.K
    h2 = Xc @ K[2]
    J = np.empty((len(Xc), 2, 3))
    J[:, 0] = (K[0][None] - uv[:, :1] * K[2][None]) / h2[:, None]
    J[:, 1] = (K[1][None] - uv[:, 1:2] * K[2][None]) / h2[:, None]
    return J


def _ray_hit(rays, tri):
    """Barycentrics (P×3) and ray parameter (P) of rays from the origin hitting triangles P×3×3."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = b - a, c - a
    pvec = np.cross(rays, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    det = np.where(np.abs(det) < 1e-300, 1e-300, det)
    tvec = -a
    beta = np.einsum("ij,ij->i", tvec, pvec) / det
    qvec = np.cross(tvec, e1)
    gamma = np.einsum("ij,ij->i", rays, qvec) / det
    t = np.einsum("ij,ij->i", e2, qvec) / det
    bary = np.stack([1 - beta - gamma, beta, gamma], axis=1)
    return bary, t


def rasterize(mesh: TriMesh, camera: Camera, antialias: bool = True) -> AttributeMaps:
    """Render attribute maps of ``mesh`` seen from ``camera``.

    The z-buffer keeps the nearest surface (no back-face culling); at equal
    depth the lower face index wins. Vertices at or behind the camera plane
    drop their faces.
    """
    H, W = camera.height, camera.width
    Xc = camera.world_to_camera(mesh.vertices)
    uv = _projection(camera, Xc)
    z = Xc[:, 2]
    faces = mesh.faces
    face_id, _ = zbuffer(uv, z, faces, W, H, NEAR)
    covered = face_id >= 0
    rows, cols = np.nonzero(covered)
    fid = face_id[rows, cols]

    pix = np.stack([cols, rows, np.ones_like(rows)], axis=1).astype(np.float64)
    rays = pix @ camera.K_inv.T
    tri = Xc[faces[fid]]
    bary, _ = _ray_hit(rays, tri)

    position = np.zeros((H, W, 3))
    pos = np.einsum("pk,pkd->pd", bary, tri)
    position[rows, cols] = pos
    depth = np.full((H, W), np.inf)
    depth[rows, cols] = pos[:, 2]
    bary_map = np.zeros((H, W, 3))
    bary_map[rows, cols] = bary

    normal = np.zeros((H, W, 3))
    nrm = np.einsum("pk,pkd->pd", bary, mesh.vertex_normals[faces[fid]])
    nlen = np.linalg.norm(nrm, axis=1, keepdims=True)
    normal[rows, cols] = nrm / np.maximum(nlen, 1e-12)

    albedo = np.zeros((H, W, 3))
    if mesh.vertex_albedo is not None:
        albedo[rows, cols] = np.einsum("pk,pkd->pd", bary, mesh.vertex_albedo[faces[fid]])

    sil = covered.astype(np.float64)
    aa = None
    if antialias and len(fid):
        aa = _silhouette_crossings(mesh, Xc, uv, covered, depth)
        np.add.at(sil.reshape(-1), aa["target"], aa["delta"])
        aa["raw"] = sil.copy()
        sil = np.clip(sil, 0.0, 1.0)
    return AttributeMaps(sil, depth, position, normal, albedo, face_id, bary_map, aa)


def _silhouette_crossings(mesh, Xc, uv, covered, depth):
    """Where visible silhouette edges cross the segment between two adjacent
    pixel centers with one covered and one background pixel.

    Edges steeper than 45° are intersected with pixel rows (horizontal pairs),
    the others with columns. The covered fraction ``s`` of the pair segment
    moves the coverage of one pixel by ``s - 0.5``: the background pixel
    gains it when s > 0.5, otherwise the covered pixel loses it.
    """
    H, W = covered.shape
    edges, adj = edge_topology(mesh.faces)
    v = Xc[mesh.faces]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    front = np.einsum("ij,ij->i", fn, v[:, 0]) < 0
    behind = np.any(v[:, :, 2] <= NEAR, axis=1)
    f0, f1 = adj[:, 0], adj[:, 1]
    boundary = f1 < 0
    sil_edge = boundary | (front[f0] != front[np.maximum(f1, 0)])
    sil_edge &= ~behind[f0] & (boundary | ~behind[np.maximum(f1, 0)])
    e = edges[sil_edge]
    out = {k: [] for k in ("ia", "ib", "major", "tau", "sigma", "target", "delta")}
    a_all, b_all = uv[e[:, 0]], uv[e[:, 1]]
    d = b_all - a_all
    steep = np.abs(d[:, 1]) >= np.abs(d[:, 0])
    for major, group in ((0, steep), (1, ~steep)):
        minor = 1 - major
        ee = e[group]
        a, b = a_all[group], b_all[group]
        lo_c = np.minimum(a[:, minor], b[:, minor])
        hi_c = np.maximum(a[:, minor], b[:, minor])
        n_lines = H if minor == 1 else W
        lo = np.maximum(np.ceil(lo_c), 0).astype(np.int64)
        hi = np.minimum(np.ceil(hi_c) - 1, n_lines - 1).astype(np.int64)
        cnt = np.maximum(hi - lo + 1, 0)
        if cnt.sum() == 0:
            continue
        rep = np.repeat(np.arange(len(ee)), cnt)
        line = lo[rep] + (np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt))
        ar, br = a[rep], b[rep]
        tau = (line - ar[:, minor]) / (br[:, minor] - ar[:, minor])
        xc = ar[:, major] + tau * (br[:, major] - ar[:, major])
        n_major = W if major == 0 else H
        p0 = np.floor(xc).astype(np.int64)
        ok = (p0 >= 0) & (p0 + 1 < n_major)
        p0c = np.clip(p0, 0, n_major - 2)
        if major == 0:
            idx0, idx1 = line * W + p0c, line * W + p0c + 1
        else:
            idx0, idx1 = p0c * W + line, (p0c + 1) * W + line
        cov_flat = covered.reshape(-1)
        c0, c1 = cov_flat[idx0], cov_flat[idx1]
        ok &= c0 != c1
        fg = np.where(c0, idx0, idx1)
        bg = np.where(c0, idx1, idx0)
        sigma = np.where(c0, 1.0, -1.0)
        fg_pos = np.where(c0, p0c, p0c + 1)
        s = (xc - fg_pos) * sigma
        ia, ib = ee[rep, 0], ee[rep, 1]
        za, zb = Xc[ia, 2], Xc[ib, 2]
        z_edge = 1.0 / ((1 - tau) / za + tau / zb)
        ok &= z_edge <= depth.reshape(-1)[fg] * (1 + EDGE_DEPTH_TOL)
        ok &= (s >= 0) & (s <= 1)
        target = np.where(s >= 0.5, bg, fg)
        out["ia"].append(ia[ok])
        out["ib"].append(ib[ok])
        out["major"].append(np.full(ok.sum(), major))
        out["tau"].append(tau[ok])
        out["sigma"].append(sigma[ok])
        out["target"].append(target[ok])
        out["delta"].append(s[ok] - 0.5)
    return {k: (np.concatenate(vs) if vs else np.zeros(0)) for k, vs in out.items()}


def raster_adjoint(grads: dict, mesh: TriMesh, camera: Camera, maps: AttributeMaps):
    """Backpropagate map gradients to the mesh.

    ``grads`` maps any of ``silhouette``, ``depth``, ``position``, ``normal``,
    ``albedo`` to an array shaped like the corresponding map. Returns
    ``(grad_vertices, grad_attributes)`` where grad_vertices is V×3 in world
    coordinates and grad_attributes holds V×3 gradients for ``normal``
    (w.r.t. the vertex normals) and ``albedo``.
    """
    H, W = maps.shape
    nv = mesh.n_vertices
    for key, g in grads.items():
        ref = getattr(maps, key)
        if g is not None and np.shape(g) != ref.shape:
            raise ValueError(f"gradient for {key} has shape {np.shape(g)}, expected {ref.shape}")
    faces = mesh.faces
    Xc = camera.world_to_camera(mesh.vertices)
    g_cam = np.zeros((nv, 3))
    g_uv = np.zeros((nv, 2))
    g_attr = {"normal": np.zeros((nv, 3)), "albedo": np.zeros((nv, 3))}

    rows, cols = np.nonzero(maps.covered)
    fid = maps.face_id[rows, cols]
    vid = faces[fid]                                  # P×3
    bary = maps.barycentric[rows, cols]
    g_b = np.zeros((len(fid), 3))
    g_pos = np.zeros((len(fid), 3))
    if grads.get("position") is not None:
        g_pos += grads["position"][rows, cols]
    if grads.get("depth") is not None:
        g_pos[:, 2] += grads["depth"][rows, cols]
    tri = Xc[vid]
    interior = False
    if np.any(g_pos):
        interior = True
        g_b += np.einsum("pd,pkd->pk", g_pos, tri)
        for k in range(3):
            _scatter(g_cam, vid[:, k], bary[:, k:k + 1] * g_pos)
    if grads.get("normal") is not None and np.any(grads["normal"]):
        interior = True
        vn = mesh.vertex_normals[vid]
        u = np.einsum("pk,pkd->pd", bary, vn)
        ulen = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-12)
        n = u / ulen
        gn = grads["normal"][rows, cols]
        g_u = (gn - n * np.einsum("pd,pd->p", gn, n)[:, None]) / ulen
        g_b += np.einsum("pd,pkd->pk", g_u, vn)
        for k in range(3):
            _scatter(g_attr["normal"], vid[:, k], bary[:, k:k + 1] * g_u)
    if grads.get("albedo") is not None and np.any(grads["albedo"]) and mesh.vertex_albedo is not None:
        interior = True
        ga = grads["albedo"][rows, cols]
        g_b += np.einsum("pd,pkd->pk", ga, mesh.vertex_albedo[vid])
        for k in range(3):
            _scatter(g_attr["albedo"], vid[:, k], bary[:, k:k + 1] * ga)
    if interior:
        # implicit dependence of the hit barycentrics on the triangle vertices
        pix = np.stack([cols, rows, np.ones_like(rows)], axis=1).astype(np.float64)
        rays = pix @ camera.K_inv.T
        A = np.zeros((len(fid), 4, 4))
        A[:, :3, :3] = tri.transpose(0, 2, 1)
        A[:, :3, 3] = -rays
        A[:, 3, :3] = 1.0
        rhs = np.concatenate([g_b, np.zeros((len(fid), 1))], axis=1)
        w = np.linalg.solve(A.transpose(0, 2, 1), rhs[..., None])[..., 0][:, :3]
        for k in range(3):
            _scatter(g_cam, vid[:, k], -bary[:, k:k + 1] * w)

    g_sil = grads.get("silhouette")
    aa = maps._aa
    if g_sil is not None and aa is not None and len(aa["target"]):
        raw = aa["raw"].reshape(-1)[aa["target"]]
        gt = g_sil.reshape(-1)[aa["target"]] * ((raw >= 0) & (raw <= 1))
        ia, ib, tau, sigma = aa["ia"], aa["ib"], aa["tau"], aa["sigma"]
        uv = _projection(camera, Xc)
        for major in (0, 1):
            sel = aa["major"] == major
            if not sel.any():
                continue
            minor = 1 - major
            a, b, t = uv[ia[sel]], uv[ib[sel]], tau[sel]
            dm = b[:, major] - a[:, major]
            dn = b[:, minor] - a[:, minor]
            gx = gt[sel] * sigma[sel]
            ga = np.zeros((sel.sum(), 2))
            gb = np.zeros((sel.sum(), 2))
            ga[:, major] = gx * (1 - t)
            gb[:, major] = gx * t
            ga[:, minor] = gx * dm * (t - 1) / dn
            gb[:, minor] = -gx * dm * t / dn
            _scatter(g_uv, ia[sel], ga)
            _scatter(g_uv, ib[sel], gb)
        if np.any(g_uv):
            J = _projection_jacobian(camera, Xc, _projection(camera, Xc))
            g_cam += np.einsum("vi,vij->vj", g_uv, J)
    return g_cam @ camera.R, g_attr


def _scatter(target, index, values):
    for d in range(values.shape[1]):
        target[:, d] += np.bincount(index, weights=values[:, d], minlength=len(target))
