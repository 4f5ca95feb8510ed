"""Analytic test scenes rendered under SH lighting with cameras on a circle."""

from __future__ import annotations

import logging

import numpy as np

from .scene import Camera, MultiViewDataset, TriMesh, View, select_neighbors
from .shading import SHLight, render_view

log = logging.getLogger(__name__)

SHAPES = ("sphere", "bumpy-sphere", "torus", "cube")
BOUNDS = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
# soft key light from above-front plus a fill term; shading stays within about [0.35, 1.05]
DEFAULT_LIGHT = (2.6, 0.15, 0.45, 0.25, 0.0, 0.05, -0.08, 0.0, 0.04)


def icosphere(level: int = 4) -> TriMesh:
    """Unit icosphere by repeated midpoint subdivision (outward winding)."""
    p = (1 + 5 ** 0.5) / 2
    v = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
         (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, dtype=np.float64) / np.linalg.norm(x) for x in v]
    faces = np.array(f, dtype=np.int64)
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.array(new, dtype=np.int64)
    return TriMesh(np.array(verts), faces)


def bump_radius(directions: np.ndarray, radius: float = 0.7, amplitude: float = 0.05) -> np.ndarray:
    d = directions
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    bumps = np.sin(5 * x) * np.sin(4 * y + 0.5) * np.cos(4 * z) + 0.5 * np.sin(7 * z + 3 * x)
    return radius * (1 + amplitude / radius * bumps)


def torus(major: float = 0.55, minor: float = 0.22, n_major: int = 96, n_minor: int = 48) -> TriMesh:
    a = np.linspace(0, 2 * np.pi, n_major, endpoint=False)
    b = np.linspace(0, 2 * np.pi, n_minor, endpoint=False)
    A, B = np.meshgrid(a, b, indexing="ij")
    r = major + minor * np.cos(B)
    verts = np.stack([r * np.cos(A), r * np.sin(A), minor * np.sin(B)], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    v00 = i * n_minor + j
    v10 = ((i + 1) % n_major) * n_minor + j
    v01 = i * n_minor + (j + 1) % n_minor
    v11 = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    faces = np.concatenate([np.stack([v00, v10, v11], -1).reshape(-1, 3),
                            np.stack([v00, v11, v01], -1).reshape(-1, 3)])
    return TriMesh(verts, faces)


def cube(half: float = 0.5, n: int = 24) -> TriMesh:
    """Axis-aligned cube with each side split into an n×n quad grid (shared vertices)."""
    g = np.linspace(-half, half, n + 1)
    verts, index = [], {}

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    faces = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            for iu in range(n):
                for iv in range(n):
                    quad = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign * half
                        p[u_ax] = g[iu + du]
                        p[v_ax] = g[iv + dv]
                        quad.append(vid(p))
                    a, b, c, d = quad
                    tri = [(a, b, c), (a, c, d)]
                    # outward winding: flip where u × v points inward
                    flip = (np.cross(np.eye(3)[u_ax], np.eye(3)[v_ax])[axis] * sign) < 0
                    faces += [(x, z, y) for x, y, z in tri] if flip else tri
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64))


def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64) / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def make_shape(name: str, detail: int = 5) -> TriMesh:
    if name == "sphere":
        ico = icosphere(detail)
        return TriMesh(0.7 * ico.vertices, ico.faces)
    if name == "bumpy-sphere":
        ico = icosphere(detail)
        d = ico.vertices
        return TriMesh(d * bump_radius(d)[:, None], ico.faces)
    if name == "torus":
        t = torus()
        return TriMesh(t.vertices @ _rotation([1, 0.3, 0], np.deg2rad(35)).T, t.faces)
    if name == "cube":
        c = cube()
        R = _rotation([0.2, 1.0, 0.4], np.deg2rad(25))
        return TriMesh(c.vertices @ R.T, c.faces)
    raise ValueError(f"unknown shape {name!r}; choose from {', '.join(SHAPES)}")


def procedural_albedo(points: np.ndarray) -> np.ndarray:
    """Smooth multi-frequency color pattern in roughly [0.2, 0.9]."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    base = 0.55 + 0.2 * np.sin(9 * x + 2) * np.cos(8 * y) + 0.12 * np.sin(17 * z + 5 * y)
    stripes = 0.08 * np.sin(23 * x + 11 * z)
    r = base + stripes
    g = 0.5 + 0.18 * np.cos(11 * y - 1) * np.sin(7 * z) + 0.1 * np.sin(19 * x - 13 * y)
    b = 0.45 + 0.15 * np.sin(13 * z + 4 * x) + 0.1 * np.cos(21 * y + 3)
    return np.clip(np.stack([r, g, b], axis=1), 0.05, 0.95)


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera 4×4 for a camera at ``center`` looking at ``target`` (+y image down)."""
    c = np.asarray(center, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - c
    f /= np.linalg.norm(f)
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ c
    return T


def ring_cameras(count: int, resolution: int = 256, distance: float = 2.5,
                 elevation_deg: float = 20.0, focal: float | None = None) -> list:
    """Cameras evenly spaced on a circle around the z axis, looking at the origin;
    alternate cameras are raised and lowered by the elevation angle."""
    f = 320.0 * resolution / 256 if focal is None else focal
    c = (resolution - 1) / 2
    K = np.array([[f, 0, c], [0, f, c], [0, 0, 1]])
    cams = []
    for i in range(count):
        az = 2 * np.pi * i / count
        el = np.deg2rad(elevation_deg) * (1 if i % 2 == 0 else -1)
        pos = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera(K, look_at(pos), resolution, resolution))
    return cams


def render_dataset(mesh: TriMesh, light: SHLight, cameras: list, bounds=BOUNDS,
                   n_neighbors: int = 4) -> MultiViewDataset:
    """Shaded images and hard silhouettes of ``mesh`` seen by each camera."""
    views = []
    for cam in cameras:
        img, mask, _ = render_view(mesh, cam, light)
        views.append(View(img, mask, cam))
    nb = select_neighbors(cameras, min(n_neighbors, len(cameras) - 1))
    return MultiViewDataset(tuple(views), np.array(bounds, dtype=np.float64), nb)


def make_scene(shape: str, views: int = 12, resolution: int = 256, light=None, detail: int = 5,
               n_neighbors: int = 4):
    """Ground-truth mesh with albedo, the SH light and the rendered dataset."""
    if views < 3:
        raise ValueError("at least 3 views are required")
    mesh = make_shape(shape, detail)
    mesh = mesh.with_albedo(procedural_albedo(mesh.vertices))
    light = SHLight(DEFAULT_LIGHT if light is None else light)
    dataset = render_dataset(mesh, light, ring_cameras(views, resolution), BOUNDS, n_neighbors)
    return mesh, light, dataset
