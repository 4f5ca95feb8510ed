"""Marching-cubes extraction and its inverse-normal backward pass.

Fields are sampled on nodes ``origin + index * spacing`` and are larger
inside the surface, so face winding and vertex normals point toward
decreasing values (outward).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from skimage.measure import marching_cubes as _sk_marching_cubes

from .scene import TriMesh, SceneError

log = logging.getLogger(__name__)

GRAD_EPS = 1e-8


class EmptyMeshError(SceneError):
    pass


def edge_crossing(fa: float, fb: float, level: float = 0.0):
    """Crossing parameter t on an edge a→b and its derivatives (dt/dfa, dt/dfb)."""
    d = fb - fa
    t = (level - fa) / d
    return t, (level - fb) / d**2, -(level - fa) / d**2


def field_gradient(values: np.ndarray, spacing) -> np.ndarray:
    """Central-difference gradient (one-sided at the border), world units, shape (..., 3)."""
    g = np.gradient(values, *np.asarray(spacing, dtype=np.float64), edge_order=1)
    return np.stack(g, axis=-1)


def marching_cubes(values: np.ndarray, origin, spacing, level: float = 0.0) -> TriMesh:
    """Extract the ``level`` set of a node-sampled field as a watertight mesh.

    Vertices shared between cells are merged by edge identity. If the level
    set reaches the grid border the field is padded with an outside value so
    the surface is capped there (a warning is logged).
    """
    values = np.asarray(values, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64) * np.ones(3)
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains non-finite values")
    vmin, vmax = values.min(), values.max()
    if not vmin < level < vmax:
        raise EmptyMeshError(f"level {level} not crossed by field range [{vmin}, {vmax}]")
    border = np.concatenate([
        values[[0, -1]].ravel(), values[:, [0, -1]].ravel(), values[:, :, [0, -1]].ravel()
    ])
    pad = 0
    if border.max() >= level:
        log.warning("level set touches the grid border; capping boundary faces")
        pad = 1
        fill = min(vmin, level) - 1.0
        values = np.pad(values, 1, constant_values=fill)
    verts, faces, _, _ = _sk_marching_cubes(values, level=level, allow_degenerate=False)
    if len(faces) == 0:
        raise EmptyMeshError("marching cubes produced no faces")
    # skimage winds faces toward increasing values; flip to face outward
    faces = faces[:, ::-1].astype(np.int64)
    verts = _refine_vertices(values, verts.astype(np.float64), level)
    grad = _vertex_field_gradient(values, spacing, verts)
    norm = np.linalg.norm(grad, axis=1, keepdims=True)
    normals = np.where(norm > GRAD_EPS, -grad / np.maximum(norm, 1e-300), 0.0)
    bad = norm[:, 0] <= GRAD_EPS
    if bad.any():
        from .scene import vertex_normals

        normals[bad] = vertex_normals(verts, faces)[bad]
    world = origin + (verts - pad) * spacing
    return TriMesh(world, faces, normals)


@dataclass(frozen=True)
class _EdgeIndex:
    node_a: np.ndarray   # V×3 integer node index
    node_b: np.ndarray   # V×3, equal to node_a where the vertex sits on a node
    t: np.ndarray        # V crossing parameter


def _vertex_edges(verts_idx: np.ndarray) -> _EdgeIndex:
    """Recover the generating grid edge of each vertex from its index-space position."""
    base = np.floor(verts_idx + 1e-9)
    frac = verts_idx - base
    frac = np.where(frac > 1 - 1e-9, 0.0, frac)
    base = np.round(verts_idx - frac)
    axis = np.argmax(frac, axis=1)
    t = frac[np.arange(len(frac)), axis]
    step = np.zeros_like(base, dtype=np.int64)
    on_edge = t > 1e-9
    step[np.flatnonzero(on_edge), axis[on_edge]] = 1
    a = base.astype(np.int64)
    return _EdgeIndex(a, a + step, np.where(on_edge, t, 0.0))


def _refine_vertices(values, verts_idx, level):
    """Recompute crossings in double precision (the extractor works in float32)."""
    e = _vertex_edges(verts_idx)
    on_edge = np.any(e.node_a != e.node_b, axis=1)
    fa = values[e.node_a[:, 0], e.node_a[:, 1], e.node_a[:, 2]]
    fb = values[e.node_b[:, 0], e.node_b[:, 1], e.node_b[:, 2]]
    d = np.where(on_edge, fb - fa, 1.0)
    t = np.where(on_edge & (d != 0), (level - fa) / np.where(d != 0, d, 1.0), e.t)
    t = np.clip(t, 0.0, 1.0)
    return e.node_a + (e.node_b - e.node_a) * t[:, None]


def _vertex_field_gradient(values, spacing, verts_idx):
    e = _vertex_edges(verts_idx)
    g = field_gradient(values, spacing)
    shape = np.array(values.shape)
    a = np.clip(e.node_a, 0, shape - 1)
    b = np.clip(e.node_b, 0, shape - 1)
    ga = g[a[:, 0], a[:, 1], a[:, 2]]
    gb = g[b[:, 0], b[:, 1], b[:, 2]]
    return (1 - e.t)[:, None] * ga + e.t[:, None] * gb


def mc_adjoint(grad_vertices: np.ndarray, mesh: TriMesh, values: np.ndarray, origin, spacing,
               level: float = 0.0) -> np.ndarray:
    """Backpropagate vertex-position gradients to the field values.

    Each vertex moves along the field gradient when the field changes
    locally: dv/df = -∇f / |∇f|². Its share is split between the two nodes
    of the generating edge with the linear-interpolation weights. The
    normal is taken from the interpolated central-difference gradient and
    the magnitude from the edge difference, so on axis edges the rule
    matches the linear-interpolation derivative. Vertices with |∇f| below
    1e-8 contribute nothing.
    """
    values = np.asarray(values, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64) * np.ones(3)
    gv = np.asarray(grad_vertices, dtype=np.float64).reshape(-1, 3)
    if len(gv) != mesh.n_vertices:
        raise ValueError("grad_vertices does not match mesh vertex count")
    out = np.zeros_like(values)
    if not np.any(gv):
        return out
    verts_idx = (mesh.vertices - origin) / spacing
    e = _vertex_edges(verts_idx)
    shape = np.array(values.shape)
    # vertices on the capping layer (outside the grid) have an outside node
    a_in = np.all((e.node_a >= 0) & (e.node_a < shape), axis=1)
    b_in = np.all((e.node_b >= 0) & (e.node_b < shape), axis=1)
    g = field_gradient(values, spacing)
    a = np.clip(e.node_a, 0, shape - 1)
    b = np.clip(e.node_b, 0, shape - 1)
    grad = (1 - e.t)[:, None] * g[a[:, 0], a[:, 1], a[:, 2]] + e.t[:, None] * g[b[:, 0], b[:, 1], b[:, 2]]
    gn2 = np.einsum("ij,ij->i", grad, grad)
    ok = gn2 > GRAD_EPS**2
    # inverse gradient magnitude: -∇f/|∇f|² = n/|∇f| with n = -∇f/|∇f|. The
    # direction comes from the interpolated gradient; the magnitude along the
    # edge comes from the edge's own difference, |∇f| = -(fb - fa) / (h n·e),
    # which reproduces the linear-interpolation derivative on planar surfaces
    n = -grad / np.sqrt(np.where(ok, gn2, 1.0))[:, None]
    inv_mag = 1.0 / np.sqrt(np.where(ok, gn2, 1.0))
    on_edge = np.any(e.node_a != e.node_b, axis=1) & a_in & b_in & ok
    rows = np.flatnonzero(on_edge)
    axis = np.argmax(e.node_b[rows] - e.node_a[rows], axis=1)
    fa = values[a[rows, 0], a[rows, 1], a[rows, 2]]
    fb = values[b[rows, 0], b[rows, 1], b[rows, 2]]
    diff = (fb - fa) / spacing[axis]
    n_e = n[rows, axis]
    edge_inv = -n_e / np.where(diff != 0, diff, 1.0)
    use = (diff != 0) & (edge_inv > 0)
    inv_mag[rows[use]] = edge_inv[use]
    c = np.where(ok, np.einsum("ij,ij->i", gv, n) * inv_mag, 0.0)
    flat = out.reshape(-1)
    ia = np.ravel_multi_index(a.T, values.shape)
    ib = np.ravel_multi_index(b.T, values.shape)
    flat += np.bincount(ia, weights=np.where(a_in, (1 - e.t) * c, 0.0), minlength=flat.size)
    flat += np.bincount(ib, weights=np.where(b_in, e.t * c, 0.0), minlength=flat.size)
    return out
