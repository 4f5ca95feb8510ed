"""Compiled scan-conversion kernel used by :mod:`mvsfs.raster`."""

import numba
import numpy as np

# barycentric slack so pixels exactly on a shared edge are never dropped by rounding
EDGE_TOL = 1e-9


@numba.njit(cache=True)
def zbuffer(uv, z, faces, width, height, near):
    """Nearest-face index and depth per pixel center.

    Pixels on shared edges are tested by both faces; at exactly equal depth
    the lower face index wins because faces are visited in order and the
    depth test is strict.
    """
    face_id = np.full((height, width), -1, dtype=np.int64)
    depth = np.full((height, width), np.inf)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        x0, y0 = uv[i0, 0], uv[i0, 1]
        x1, y1 = uv[i1, 0], uv[i1, 1]
        x2, y2 = uv[i2, 0], uv[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        xmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        xmax = min(int(np.floor(max(x0, x1, x2))), width - 1)
        ymin = max(int(np.ceil(min(y0, y1, y2))), 0)
        ymax = min(int(np.floor(max(y0, y1, y2))), height - 1)
        inv_area = 1.0 / area
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) * inv_area
                l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) * inv_area
                l2 = 1.0 - l0 - l1
                if l0 < -EDGE_TOL or l1 < -EDGE_TOL or l2 < -EDGE_TOL:
                    continue
                zz = 1.0 / (l0 / z0 + l1 / z1 + l2 / z2)
                if zz < depth[py, px]:
                    depth[py, px] = zz
                    face_id[py, px] = f
    return face_id, depth
