"""Core domain types and camera projection math.

Cameras use a world-to-camera rigid transform ``T`` with +z pointing
forward, and pixel centers at integer coordinates: ``(u, v) = (col, row)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class SceneError(ValueError):
    """Invalid camera, view or dataset content."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luma conversion of an H×W×3 image in [0, 1]. Grayscale input is returned clipped."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return np.clip(image, 0.0, 1.0)
    return np.clip(image[..., :3] @ LUMA_WEIGHTS, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Camera:
    K: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = _frozen(self.K).reshape(3, 3)
        T = _frozen(self.T).reshape(4, 4)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise SceneError(f"focal lengths must be positive, got fx={K[0, 0]}, fy={K[1, 1]}")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] == 0:
            raise SceneError("intrinsics must be upper triangular with K[2,2] != 0")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise SceneError("extrinsic rotation block is not a proper rotation")
        if self.width <= 0 or self.height <= 0:
            raise SceneError("image size must be positive")
        object.__setattr__(self, "_K_inv", np.linalg.inv(K))

    @property
    def R(self) -> np.ndarray:
        return self.T[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T[:3, 3]

    @property
    def K_inv(self) -> np.ndarray:
        return self._K_inv

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def axis(self) -> np.ndarray:
        """Optical axis (+z of the camera) in world coordinates."""
        return self.R[2].copy()

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.t) @ self.R

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions (z = 1) through every pixel center, H×W×3."""
        v, u = np.mgrid[: self.height, : self.width].astype(np.float64)
        pix = np.stack([u, v, np.ones_like(u)], axis=-1)
        return pix @ self.K_inv.T

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            np.array_equal(self.K, other.K)
            and np.array_equal(self.T, other.T)
            and self.width == other.width
            and self.height == other.height
        )

    __hash__ = None


def project_camera(camera: Camera, points_cam: np.ndarray):
    """Project camera-frame points. Returns (pixels N×2, depth N); pixels are NaN where z <= 0."""
    p = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        h = p @ camera.K.T
        pix = h[:, :2] / h[:, 2:3]
    pix[z <= 0] = np.nan
    return pix, z.copy()


def project(camera: Camera, points_world: np.ndarray):
    """Project world points into ``camera``.

    Returns ``(pixels, depth)``. A single 3-vector gives a 2-vector and a
    scalar. Points behind the camera (depth <= 0) get NaN pixels, which is
    the behind-camera flag callers should test for.
    """
    pts = np.asarray(points_world, dtype=np.float64)
    single = pts.ndim == 1
    pix, z = project_camera(camera, camera.world_to_camera(np.atleast_2d(pts)))
    if single:
        return pix[0], float(z[0])
    return pix, z


def unproject(camera: Camera, pixels: np.ndarray, depth) -> np.ndarray:
    """Back-project pixels at the given depths to camera-frame 3D points."""
    pix = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise SceneError("unproject requires depth > 0")
    single = pix.ndim == 1
    pix = np.atleast_2d(pix)
    h = np.concatenate([pix, np.ones((len(pix), 1))], axis=1)
    rays = h @ camera.K_inv.T
    rays = rays / rays[:, 2:3]
    out = rays * np.atleast_1d(d).reshape(-1, 1)
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class View:
    image: np.ndarray
    mask: np.ndarray
    camera: Camera
    gray: np.ndarray = field(default=None)

    def __post_init__(self):
        image = _frozen(self.image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise SceneError(f"image must be H×W×3, got {image.shape}")
        mask = np.asarray(self.mask)
        if mask.dtype != bool:
            if not np.all((mask == 0) | (mask == 1)):
                raise SceneError("mask values must be exactly 0 or 1")
        mask = _frozen(mask, dtype=bool)
        h, w = image.shape[:2]
        if mask.shape != (h, w):
            raise SceneError(f"mask shape {mask.shape} does not match image {(h, w)}")
        if (self.camera.height, self.camera.width) != (h, w):
            raise SceneError(
                f"camera size {(self.camera.height, self.camera.width)} does not match image {(h, w)}"
            )
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "gray", _frozen(to_grayscale(image)))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def __eq__(self, other):
        if not isinstance(other, View):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
            and self.camera == other.camera
        )

    __hash__ = None


def select_neighbors(cameras, count: int = 4) -> list[list[int]]:
    """For each camera, the ``count`` others with the smallest optical-axis angle."""
    axes = np.array([c.axis for c in cameras])
    cosang = np.clip(axes @ axes.T, -1.0, 1.0)
    ang = np.arccos(cosang)
    out = []
    for i in range(len(cameras)):
        a = ang[i].copy()
        a[i] = np.inf
        order = np.argsort(a, kind="stable")
        out.append([int(j) for j in order[: min(count, len(cameras) - 1)]])
    return out


@dataclass(frozen=True, eq=False)
class MultiViewDataset:
    views: tuple
    bounds: np.ndarray
    source_neighbors: tuple = None

    def __post_init__(self):
        views = tuple(self.views)
        if len(views) < 2:
            raise SceneError("a dataset needs at least 2 views")
        bounds = _frozen(self.bounds).reshape(2, 3)
        if np.any(bounds[1] <= bounds[0]):
            raise SceneError(f"degenerate bounds {bounds.tolist()}")
        nb = self.source_neighbors
        if nb is None:
            nb = select_neighbors([v.camera for v in views])
        nb = tuple(tuple(int(j) for j in row) for row in nb)
        if len(nb) != len(views):
            raise SceneError("one neighbor list per view is required")
        for i, row in enumerate(nb):
            for j in row:
                if j == i or not 0 <= j < len(views):
                    raise SceneError(f"invalid source neighbor {j} for view {i}")
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "source_neighbors", nb)

    def __len__(self):
        return len(self.views)

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.views]

    def subset(self, indices) -> "MultiViewDataset":
        """Dataset restricted to ``indices``; neighbors are recomputed."""
        return MultiViewDataset(tuple(self.views[i] for i in indices), self.bounds)

    def __eq__(self, other):
        if not isinstance(other, MultiViewDataset):
            return NotImplemented
        return (
            len(self.views) == len(other.views)
            and all(a == b for a, b in zip(self.views, other.views))
            and np.array_equal(self.bounds, other.bounds)
            and self.source_neighbors == other.source_neighbors
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class OrientedPointCloud:
    positions: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        p = _frozen(self.positions).reshape(-1, 3)
        n = _frozen(self.normals).reshape(-1, 3)
        if len(p) != len(n):
            raise SceneError("positions and normals differ in length")
        if len(p) < 4:
            raise SceneError("an oriented point cloud needs at least 4 points")
        if not np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-5):
            raise SceneError("point normals must be unit length")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.positions)


def face_normals(vertices: np.ndarray, faces: np.ndarray, unit: bool = True) -> np.ndarray:
    """Per-face normals (area-weighted cross products if ``unit`` is False)."""
    v = vertices[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    if unit:
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return n


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    fn = face_normals(vertices, faces, unit=False)
    vn = np.zeros_like(vertices, dtype=np.float64)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return np.where(norm > 0, vn / np.maximum(norm, 1e-300), np.array([0.0, 0.0, 1.0]))


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray = None
    vertex_albedo: np.ndarray = None

    def __post_init__(self):
        v = _frozen(self.vertices).reshape(-1, 3)
        f = _frozen(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise SceneError("face index out of range")
        vn = self.vertex_normals
        vn = vertex_normals(v, f) if vn is None else np.asarray(vn, dtype=np.float64).reshape(-1, 3)
        if len(vn) != len(v):
            raise SceneError("vertex normal count does not match vertices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "vertex_normals", _frozen(vn))
        if self.vertex_albedo is not None:
            a = _frozen(self.vertex_albedo).reshape(-1, 3)
            if len(a) != len(v):
                raise SceneError("vertex albedo count does not match vertices")
            object.__setattr__(self, "vertex_albedo", a)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(face_normals(self.vertices, self.faces, unit=False), axis=1)

    def with_vertices(self, vertices, recompute_normals: bool = True) -> "TriMesh":
        vn = None if recompute_normals else self.vertex_normals
        return TriMesh(vertices, self.faces, vn, self.vertex_albedo)

    def with_albedo(self, albedo) -> "TriMesh":
        return TriMesh(self.vertices, self.faces, self.vertex_normals, albedo)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges (E×2, sorted) and the number of faces using each."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def is_watertight(self) -> bool:
        """Every edge shared by exactly two faces."""
        if self.n_faces == 0:
            return False
        _, counts = self.edges()
        return bool(np.all(counts == 2))

    def degenerate_faces(self, tol: float = 1e-12) -> np.ndarray:
        return np.flatnonzero(self.face_areas() <= tol)
