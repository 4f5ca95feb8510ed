"""Dataset directories, mesh files (OBJ/PLY) and image files.

Dataset layout::

    cameras.json        {"bounds": [[x0,y0,z0],[x1,y1,z1]],
                         "views": [{"K": [9 floats], "T": [16 floats],
                                    "width": W, "height": H}, ...]}
    images/0000.png     RGB, 8 or 16 bit
    masks/0000.png      grayscale, > 127 is foreground
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Camera, MultiViewDataset, SceneError, TriMesh, View


class DatasetError(SceneError):
    pass


def read_image(path) -> np.ndarray:
    """Read a PNG as float64 in [0, 1]; 8-bit values are divided by 255 exactly."""
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if mode in ("I;16", "I;16B", "I"):
        return arr.astype(np.float64) / 65535.0
    arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr


def write_image(path, image: np.ndarray, bits: int = 8) -> None:
    """Write an H×W or H×W×3 float image in [0, 1] as PNG."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        if img.ndim != 2:
            raise ValueError("16-bit output supports single-channel images only")
        Image.fromarray(np.round(img * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


def write_depth_png(path, depth: np.ndarray, near: float, far: float) -> None:
    """16-bit depth dump: value = (d - near) / (far - near) * 65535, background = 65535."""
    d = np.where(np.isfinite(depth), (depth - near) / (far - near), 1.0)
    write_image(path, np.clip(d, 0.0, 1.0), bits=16)


def camera_to_json(cam: Camera) -> dict:
    return {
        "K": [float(x) for x in cam.K.ravel()],
        "T": [float(x) for x in cam.T.ravel()],
        "width": cam.width,
        "height": cam.height,
    }


def camera_from_json(entry: dict, name: str = "camera") -> Camera:
    try:
        K = np.array(entry["K"], dtype=np.float64)
        T = np.array(entry["T"], dtype=np.float64)
        w, h = int(entry["width"]), int(entry["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{name}: malformed camera entry ({exc})") from None
    if K.size != 9 or T.size != 16:
        raise DatasetError(f"{name}: K needs 9 values and T needs 16")
    K = K.reshape(3, 3)
    if abs(np.linalg.det(K)) < 1e-12:
        raise DatasetError(f"{name}: intrinsic matrix is not invertible")
    try:
        return Camera(K, T.reshape(4, 4), w, h)
    except SceneError as exc:
        raise DatasetError(f"{name}: {exc}") from None


def load_dataset(path, n_neighbors: int = 4) -> MultiViewDataset:
    from .scene import select_neighbors

    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.is_file():
        raise DatasetError(f"missing {cam_file}")
    meta = json.loads(cam_file.read_text())
    if "bounds" not in meta:
        raise DatasetError(f"{cam_file}: world bounds are required")
    views = []
    for i, entry in enumerate(meta.get("views", [])):
        cam = camera_from_json(entry, name=f"view {i}")
        img_path = root / "images" / f"{i:04d}.png"
        mask_path = root / "masks" / f"{i:04d}.png"
        for p in (img_path, mask_path):
            if not p.is_file():
                raise DatasetError(f"view {i}: missing {p}")
        img = read_image(img_path)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        m = read_image(mask_path)
        if m.ndim == 3:
            m = m[..., 0]
        mask = m > (127.0 / 255.0)
        if img.shape[:2] != (cam.height, cam.width) or mask.shape != img.shape[:2]:
            raise DatasetError(
                f"view {i}: image {img.shape[:2]} / mask {mask.shape} do not match camera "
                f"{(cam.height, cam.width)}"
            )
        views.append(View(img, mask, cam))
    if len(views) < 2:
        raise DatasetError(f"{cam_file}: at least 2 views required, found {len(views)}")
    neighbors = select_neighbors([v.camera for v in views], n_neighbors)
    return MultiViewDataset(tuple(views), np.array(meta["bounds"], dtype=np.float64), neighbors)


def save_dataset(dataset: MultiViewDataset, path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    meta = {
        "bounds": dataset.bounds.tolist(),
        "views": [camera_to_json(v.camera) for v in dataset.views],
    }
    (root / "cameras.json").write_text(json.dumps(meta, indent=1))
    for i, v in enumerate(dataset.views):
        write_image(root / "images" / f"{i:04d}.png", v.image)
        write_image(root / "masks" / f"{i:04d}.png", v.mask.astype(np.float64))


# -- meshes -----------------------------------------------------------------

def export_mesh(mesh: TriMesh, path) -> None:
    """Write OBJ (positions, normals) or PLY (adds per-vertex albedo) by suffix."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        _write_obj(mesh, path)
    elif suffix == ".ply":
        _write_ply(mesh, path)
    else:
        raise ValueError(f"unsupported mesh format {suffix!r}")


def load_mesh(path) -> TriMesh:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mesh file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _read_obj(path)
    if suffix == ".ply":
        return _read_ply(path)
    raise ValueError(f"unsupported mesh format {suffix!r}")


def _write_obj(mesh, path):
    lines = ["# vertices {} faces {}\n".format(mesh.n_vertices, mesh.n_faces)]
    lines += ["v {!r} {!r} {!r}\n".format(*map(float, v)) for v in mesh.vertices]
    lines += ["vn {!r} {!r} {!r}\n".format(*map(float, n)) for n in mesh.vertex_normals]
    lines += ["f {0}//{0} {1}//{1} {2}//{2}\n".format(*(f + 1)) for f in mesh.faces]
    path.write_text("".join(lines))


def _read_obj(path):
    verts, norms, faces = [], [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            norms.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    vn = np.array(norms) if len(norms) == len(verts) and norms else None
    return TriMesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3), vn)


_PLY_VERTEX = [
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("albedo_r", "<f4"), ("albedo_g", "<f4"), ("albedo_b", "<f4"),
]
_PLY_TYPES = {"double": "<f8", "float": "<f4", "float64": "<f8", "float32": "<f4",
              "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4", "uint": "<u4",
              "uint32": "<u4", "char": "i1", "short": "<i2", "ushort": "<u2"}
_PLY_NAMES = {"<f8": "double", "<f4": "float", "u1": "uchar"}


def _write_ply(mesh, path):
    """Binary little-endian PLY. Positions are doubles; albedo, when present, is
    stored both as 8-bit RGB for viewers and as float properties for reload."""
    nv, nf = mesh.n_vertices, mesh.n_faces
    alb = mesh.vertex_albedo
    fields = _PLY_VERTEX if alb is not None else _PLY_VERTEX[:6]
    vert = np.zeros(nv, dtype=fields)
    vert["x"], vert["y"], vert["z"] = mesh.vertices.T
    vert["nx"], vert["ny"], vert["nz"] = mesh.vertex_normals.T
    if alb is not None:
        rgb = np.round(np.clip(alb, 0, 1) * 255).astype(np.uint8)
        vert["red"], vert["green"], vert["blue"] = rgb.T
        vert["albedo_r"], vert["albedo_g"], vert["albedo_b"] = alb.T
    face = np.zeros(nf, dtype=[("n", "u1"), ("i", "<i4", (3,))])
    face["n"] = 3
    face["i"] = mesh.faces
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {nv}"]
    header += [f"property {_PLY_NAMES[t]} {name}" for name, t in fields]
    header += [f"element face {nf}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(vert.tobytes())
        fh.write(face.tobytes())


def _read_ply(path):
    data = path.read_bytes()
    end = data.index(b"\n", data.index(b"end_header")) + 1
    header = data[:end].decode("ascii").splitlines()
    fmt, elements, current = None, [], None
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            current = {"name": tok[1], "count": int(tok[2]), "props": []}
            elements.append(current)
        elif tok[0] == "property":
            current["props"].append(tok[1:])
    body = data[end:]
    if fmt == "ascii":
        return _read_ply_ascii(elements, body.decode("ascii"))
    if fmt != "binary_little_endian":
        raise ValueError(f"unsupported PLY format {fmt}")
    offset = 0
    verts = faces = None
    for el in elements:
        if el["name"] == "vertex":
            dt = np.dtype([(p[1], _PLY_TYPES[p[0]]) for p in el["props"]])
            verts = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
            offset += dt.itemsize * el["count"]
        elif el["name"] == "face":
            cnt_t, idx_t = _PLY_TYPES[el["props"][0][1]], _PLY_TYPES[el["props"][0][2]]
            dt = np.dtype([("n", cnt_t), ("i", idx_t, (3,))])
            faces = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
            if np.any(faces["n"] != 3):
                raise ValueError("only triangle faces are supported")
            offset += dt.itemsize * el["count"]
    return _mesh_from_fields(verts, faces["i"] if faces is not None else np.zeros((0, 3)))


def _read_ply_ascii(elements, text):
    rows = iter(text.split("\n"))
    verts = faces = None
    for el in elements:
        if el["name"] == "vertex":
            names = [p[1] for p in el["props"]]
            arr = np.array([next(rows).split() for _ in range(el["count"])], dtype=np.float64)
            verts = {n: arr[:, k] for k, n in enumerate(names)}
        elif el["name"] == "face":
            faces = np.array([next(rows).split()[1:4] for _ in range(el["count"])], dtype=np.int64)
    return _mesh_from_fields(verts, faces)


def _mesh_from_fields(verts, faces):
    names = verts.dtype.names if hasattr(verts, "dtype") else tuple(verts)
    v = np.stack([np.asarray(verts[k], dtype=np.float64) for k in ("x", "y", "z")], axis=1)
    vn = None
    if all(k in names for k in ("nx", "ny", "nz")):
        vn = np.stack([np.asarray(verts[k], dtype=np.float64) for k in ("nx", "ny", "nz")], axis=1)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        vn = vn / np.maximum(norm, 1e-300)
    alb = None
    if all(k in names for k in ("albedo_r", "albedo_g", "albedo_b")):
        alb = np.stack([np.asarray(verts[k], dtype=np.float64) for k in ("albedo_r", "albedo_g", "albedo_b")], axis=1)
    elif all(k in names for k in ("red", "green", "blue")):
        alb = np.stack([np.asarray(verts[k], dtype=np.float64) for k in ("red", "green", "blue")], axis=1) / 255.0
    return TriMesh(v, np.asarray(faces, dtype=np.int64), vn, alb)


def write_light(path, coeffs) -> None:
    """A light is a JSON array of 9 floats; a list of lights is an array of arrays."""
    arr = np.asarray(coeffs, dtype=np.float64)
    Path(path).write_text(json.dumps(arr.tolist()))


def read_light(path) -> np.ndarray:
    """Coefficients as a 9-vector or an N×9 array; ``null`` entries of a
    per-view list (views without a usable light) become rows of NaN."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, list) and any(x is None for x in data):
        data = [[float("nan")] * 9 if x is None else x for x in data]
    arr = np.array(data, dtype=np.float64)
    if arr.shape[-1] != 9:
        raise ValueError(f"{path}: a light needs 9 coefficients, got shape {arr.shape}")
    return arr
