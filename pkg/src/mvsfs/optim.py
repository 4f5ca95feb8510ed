"""Adam, the silhouette loss, surface resampling and the two optimization
stages: oriented-point optimization and fixed-topology shading refinement."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .config import Config
from .dpsr import dpsr, dpsr_adjoint
from .isosurface import EmptyMeshError, marching_cubes, mc_adjoint
from .photocons import ncc_loss, sample_patches
from .raster import AttributeMaps, raster_adjoint, rasterize
from .scene import MultiViewDataset, OrientedPointCloud, SceneError, TriMesh, face_normals
from .shading import InsufficientDataError, SHLight, estimate_light, laplacian_reg, sfs_loss, uniform_laplacian

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "view", "L_sil", "L_ncc", "L_sfs", "total")


class OptimizationError(RuntimeError):
    pass


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr) -> dict:
    """One bias-corrected Adam update of every array in ``params``.

    ``lr`` is a float or a dict keyed like ``params``. A parameter whose
    gradient contains non-finite values is left untouched for this step.
    Returns new arrays; the inputs are not modified.
    """
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient for %s; skipping its update (%d skipped so far)",
                        name, state.skipped)
            out[name] = p.copy()
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        rate = lr[name] if isinstance(lr, dict) else lr
        out[name] = p - rate * mhat / (np.sqrt(vhat) + state.eps)
    return out


# ---------------------------------------------------------------- losses and sampling

def silhouette_loss(rendered: list, masks: list, return_grad: bool = False):
    """Mean over views of the per-pixel mean squared mask difference.

    ``rendered`` holds silhouette arrays or AttributeMaps.
    """
    sils = [r.silhouette if isinstance(r, AttributeMaps) else np.asarray(r, dtype=np.float64)
            for r in rendered]
    if len(sils) != len(masks):
        raise ValueError("one mask per rendered view is required")
    n = len(sils)
    loss, grads = 0.0, []
    for s, m in zip(sils, masks):
        d = s - np.asarray(m, dtype=np.float64)
        loss += float(np.mean(d * d)) / n
        grads.append(2.0 * d / (d.size * n))
    return (loss, grads) if return_grad else loss


def resample_points(mesh: TriMesh, count: int, seed) -> OrientedPointCloud:
    """Area-weighted uniform samples on the surface with their face normals."""
    areas = mesh.face_areas()
    total = areas.sum()
    if mesh.n_faces == 0 or not np.isfinite(total) or total <= 0:
        raise SceneError("cannot sample a mesh with zero surface area")
    rng = np.random.default_rng(seed)
    fid = rng.choice(mesh.n_faces, size=count, p=areas / total)
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    tri = mesh.vertices[mesh.faces[fid]]
    pts = np.einsum("nk,nkd->nd", w, tri)
    nrm = face_normals(mesh.vertices, mesh.faces)[fid]
    return OrientedPointCloud(pts, nrm)


def vertex_normals_adjoint(vertices: np.ndarray, faces: np.ndarray, grad_normals: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. vertex positions given the gradient w.r.t. the
    area-weighted unit vertex normals."""
    v = np.asarray(vertices, dtype=np.float64)
    e1 = v[faces[:, 1]] - v[faces[:, 0]]
    e2 = v[faces[:, 2]] - v[faces[:, 0]]
    fn = np.cross(e1, e2)
    raw = np.zeros_like(v)
    for k in range(3):
        np.add.at(raw, faces[:, k], fn)
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    safe = np.maximum(norm, 1e-300)
    n = raw / safe
    g = np.asarray(grad_normals, dtype=np.float64)
    g_raw = np.where(norm > 0, (g - n * np.einsum("vd,vd->v", g, n)[:, None]) / safe, 0.0)
    g_fn = g_raw[faces].sum(axis=1)
    g1 = np.cross(e2, g_fn)
    g2 = np.cross(g_fn, e1)
    out = np.zeros_like(v)
    np.add.at(out, faces[:, 1], g1)
    np.add.at(out, faces[:, 2], g2)
    np.add.at(out, faces[:, 0], -(g1 + g2))
    return out


def interpolation_matrix(maps: AttributeMaps, faces: np.ndarray, n_vertices: int) -> sp.csr_matrix:
    """Sparse (H·W)×V matrix mapping per-vertex values to their rasterized
    per-pixel interpolation (rows of uncovered pixels are empty)."""
    H, W = maps.shape
    rows, cols = np.nonzero(maps.covered)
    pix = rows * W + cols
    vid = faces[maps.face_id[rows, cols]]
    bary = maps.barycentric[rows, cols]
    return sp.csr_matrix((bary.ravel(), (np.repeat(pix, 3), vid.ravel())), shape=(H * W, n_vertices))


# ---------------------------------------------------------------- stage 1

@dataclass
class Stage1Result:
    points: OrientedPointCloud
    mesh: TriMesh
    log: list                      # rows keyed by LOG_FIELDS
    seconds: float = 0.0


def extract_mesh(points: OrientedPointCloud, res: int, bounds, sig: float, workers: int = 1):
    """Points → (indicator grid, squashed field, mesh at its zero level set)."""
    grid = dpsr(points, res, bounds, sig, workers)
    field = np.tanh(grid.values)
    mesh = marching_cubes(field, grid.origin, grid.spacing, 0.0)
    return grid, field, mesh


def _stage1_seed(seed: int, epoch: int, view: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, epoch, view])


def stage1_step(points: OrientedPointCloud, dataset: MultiViewDataset, ref: int, config: Config,
                epoch: int = 0):
    """Loss terms and gradients w.r.t. point positions and normals for one reference view."""
    bounds = dataset.bounds
    grid, field, mesh = extract_mesh(points, config.grid_res_dpsr, bounds, config.sig, config.threads)
    view_ids = [ref] + list(dataset.source_neighbors[ref])
    maps = {i: rasterize(mesh, dataset.views[i].camera) for i in view_ids}
    sil, g_sils = silhouette_loss([maps[i] for i in view_ids],
                                  [dataset.views[i].mask for i in view_ids], return_grad=True)
    grads = {i: {"silhouette": config.lambda_sil * g} for i, g in zip(view_ids, g_sils)}

    l_ncc = 0.0
    n_pairs = 0
    if config.use_ncc and config.lambda_ncc > 0:
        v_ref = dataset.views[ref]
        patches = sample_patches(maps[ref], config.n_patches, config.patch_size,
                                 _stage1_seed(config.seed, epoch, ref))
        sources = [(dataset.views[s].gray, maps[s].depth, dataset.views[s].camera)
                   for s in dataset.source_neighbors[ref]]
        res = ncc_loss(patches, maps[ref], v_ref.gray, v_ref.camera, sources,
                       config.delta_ncc, config.delta_d, point_based=config.typical_ncc)
        l_ncc, n_pairs = res.loss, res.n_pairs
        grads[ref]["position"] = config.lambda_ncc * res.grad_position

    g_vert = np.zeros_like(mesh.vertices)
    for i in view_ids:
        gv, _ = raster_adjoint(grads[i], mesh, dataset.views[i].camera, maps[i])
        g_vert += gv
    g_field = mc_adjoint(g_vert, mesh, field, grid.origin, grid.spacing, 0.0)
    g_chi = g_field * (1.0 - field * field)
    g_pos, g_nrm = dpsr_adjoint(g_chi, points, grid, config.sig, config.threads)
    total = config.lambda_sil * sil + config.lambda_ncc * l_ncc
    terms = {"L_sil": sil, "L_ncc": l_ncc, "total": total, "n_pairs": n_pairs}
    return terms, g_pos, g_nrm, mesh


def _clamp_to_bounds(x, bounds, res):
    lo = np.asarray(bounds[0], dtype=np.float64)
    h = (np.asarray(bounds[1]) - lo) / res
    return np.clip(x, lo, lo + (res - 1) * h)


def stage1_optimize(dataset: MultiViewDataset, config: Config, init: OrientedPointCloud,
                    log_path=None) -> Stage1Result:
    """Optimize the oriented point cloud for ``config.epochs_stage1`` epochs.

    An epoch visits each view once as the reference, taking one Adam step
    per visit. Points are resampled from the current mesh every
    ``config.resample_every`` epochs (which also resets the optimizer). If
    the surface vanishes, the last valid state is restored with half the
    learning rate; a second failure aborts.
    """
    t0 = time.perf_counter()
    res, bounds = config.grid_res_dpsr, dataset.bounds
    points = init
    rows: list = []
    if config.epochs_stage1 == 0:
        mesh = extract_mesh(points, res, bounds, config.sig, config.threads)[2]
        return Stage1Result(points, mesh, rows, time.perf_counter() - t0)
    state = AdamState()
    lr = config.lr_points
    failures = 0
    last_valid = None
    for epoch in range(config.epochs_stage1):
        for ref in range(len(dataset)):
            try:
                terms, g_pos, g_nrm, mesh = stage1_step(points, dataset, ref, config, epoch)
            except EmptyMeshError as exc:
                failures += 1
                if failures >= 2 or last_valid is None:
                    raise OptimizationError(
                        f"surface vanished at epoch {epoch}, view {ref} after a learning-rate "
                        f"reduction to {lr:g}: {exc}") from exc
                log.warning("surface vanished at epoch %d view %d; reverting and halving the learning rate",
                            epoch, ref)
                points, state = last_valid
                state = AdamState(dict(state.m), dict(state.v), state.step)
                lr *= 0.5
                continue
            last_valid = (points, AdamState(dict(state.m), dict(state.v), state.step))
            new = adam_step({"pos": points.positions, "nrm": points.normals},
                            {"pos": g_pos, "nrm": g_nrm}, state, lr)
            nrm = new["nrm"]
            nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
            points = OrientedPointCloud(_clamp_to_bounds(new["pos"], bounds, res), nrm)
            rows.append({"epoch": epoch, "view": ref, "L_sil": terms["L_sil"], "L_ncc": terms["L_ncc"],
                         "L_sfs": 0.0, "total": terms["total"]})
        log.info("stage 1 epoch %d: mean total %.6f", epoch,
                 np.mean([r["total"] for r in rows if r["epoch"] == epoch] or [np.nan]))
        last_epoch = epoch == config.epochs_stage1 - 1
        if not last_epoch and (epoch + 1) % config.resample_every == 0:
            mesh = extract_mesh(points, res, bounds, config.sig, config.threads)[2]
            points = resample_points(mesh, config.n_points, _stage1_seed(config.seed, epoch, len(dataset)))
            state = AdamState()
    mesh = extract_mesh(points, res, bounds, config.sig, config.threads)[2]
    if log_path is not None:
        write_loss_log(log_path, rows)
    return Stage1Result(points, mesh, rows, time.perf_counter() - t0)


def write_loss_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------- stage 2

@dataclass
class Stage2Result:
    mesh: TriMesh
    lights: list                   # per-view SHLight, None where excluded
    log: list


def estimate_lights(mesh: TriMesh, dataset: MultiViewDataset, shared: bool = False,
                    albedo: float = 1.0) -> list:
    """Per-view (or one shared) SH light from rendered normals and input grayscale.

    The fit explains the image as a surface of uniform gray ``albedo``;
    light and albedo are only determined up to a common scale, and this
    choice keeps the albedo that reproduces the images near its initial
    value instead of pushing it against the upper clip. Views with
    degenerate or insufficient data get ``None``.
    """
    if albedo <= 0:
        raise ValueError("reference albedo must be positive")
    maps = [rasterize(mesh, v.camera, antialias=False) for v in dataset.views]
    if shared:
        nrm = np.concatenate([m.normal[m.covered & v.mask] for m, v in zip(maps, dataset.views)])
        gray = np.concatenate([v.gray[m.covered & v.mask] for m, v in zip(maps, dataset.views)]) / albedo
        light = estimate_light(nrm[:, None], gray[:, None], np.ones((len(gray), 1), bool))
        return [None if light.degenerate else light] * len(dataset)
    out = []
    for i, (m, v) in enumerate(zip(maps, dataset.views)):
        try:
            light = estimate_light(m.normal, v.gray / albedo, m.covered & v.mask)
        except InsufficientDataError as exc:
            log.warning("view %d excluded from shading: %s", i, exc)
            light = None
        if light is not None and light.degenerate:
            log.warning("view %d excluded from shading: degenerate light estimate", i)
            light = None
        out.append(light)
    return out


def _sfs_terms(mesh, dataset, lights, maps_list, interp=None):
    """Mean sfs loss over active views and its gradients (albedo V×3, vertices V×3).

    With ``interp`` (per-view interpolation matrices) the geometry is
    treated as fixed and only the albedo gradient is formed.
    """
    need_geometry = interp is None
    active = [i for i, l in enumerate(lights) if l is not None]
    g_alb = np.zeros((mesh.n_vertices, 3))
    g_vert = np.zeros((mesh.n_vertices, 3))
    g_vn = np.zeros((mesh.n_vertices, 3))
    total = 0.0
    for i in active:
        view, maps = dataset.views[i], maps_list[i]
        mask = maps.covered & view.mask
        loss, gA, gN = sfs_loss(maps.albedo, maps.normal, lights[i], view.image, mask, return_grad=True)
        total += loss / len(active)
        gA /= len(active)
        gN /= len(active)
        if need_geometry:
            gv, ga = raster_adjoint({"albedo": gA, "normal": gN}, mesh, view.camera, maps)
            g_vert += gv
            g_vn += ga["normal"]
            g_alb += ga["albedo"]
        else:
            g_alb += interp[i].T @ gA.reshape(-1, 3)
    if need_geometry:
        g_vert += vertex_normals_adjoint(mesh.vertices, mesh.faces, g_vn)
    return total, g_alb, g_vert


def stage2_refine(mesh: TriMesh, dataset: MultiViewDataset, config: Config, lights=None) -> Stage2Result:
    """Recover per-vertex albedo, then jointly refine vertices and albedo.

    ``lights`` may supply known per-view lights (a list of SHLight or a
    single SHLight for every view); by default they are estimated once from
    the input mesh and kept fixed.
    """
    if lights is None:
        lights = estimate_lights(mesh, dataset, config.shared_light, config.init_albedo)
    elif isinstance(lights, SHLight):
        lights = [lights] * len(dataset)
    if len(lights) != len(dataset):
        raise ValueError("one light per view is required")
    if all(l is None for l in lights):
        raise OptimizationError("no view has a usable light estimate")
    faces = mesh.faces
    L = uniform_laplacian(mesh.n_vertices, faces)
    albedo = np.full((mesh.n_vertices, 3), float(config.init_albedo))
    cur = mesh.with_albedo(albedo)
    rows: list = []

    # phase A: geometry is fixed, so rasterization is done once
    maps_list = [rasterize(cur, v.camera, antialias=False) for v in dataset.views]
    interp = [interpolation_matrix(maps, faces, mesh.n_vertices) for maps in maps_list]
    state = AdamState()
    for epoch in range(config.epochs_albedo):
        for maps, W in zip(maps_list, interp):
            maps.albedo = (W @ albedo).reshape(maps.albedo.shape)
        l_sfs, g_alb, _ = _sfs_terms(cur, dataset, lights, maps_list, interp)
        l_reg, g_reg = laplacian_reg(L, albedo, return_grad=True)
        total = config.lambda_sfs * l_sfs + config.lambda_albedo * l_reg
        albedo = adam_step({"a": albedo}, {"a": config.lambda_sfs * g_alb + config.lambda_albedo * g_reg},
                           state, config.lr_albedo_init)["a"]
        albedo = np.clip(albedo, 0.0, 1.0)
        rows.append({"epoch": epoch, "view": -1, "L_sil": 0.0, "L_ncc": 0.0, "L_sfs": l_sfs, "total": total})
    cur = cur.with_albedo(albedo)

    # phase B: joint refinement of vertices and albedo
    if config.refine_geometry and config.epochs_joint > 0:
        state = AdamState()
        verts = np.array(cur.vertices)
        for epoch in range(config.epochs_joint):
            maps_list = [rasterize(cur, v.camera, antialias=False) for v in dataset.views]
            l_sfs, g_alb, g_vert = _sfs_terms(cur, dataset, lights, maps_list)
            l_areg, g_areg = laplacian_reg(L, albedo, return_grad=True)
            l_mesh, g_mesh = laplacian_reg(L, verts, return_grad=True)
            total = config.lambda_sfs * l_sfs + config.lambda_albedo * l_areg + config.lambda_mesh * l_mesh
            new = adam_step(
                {"v": verts, "a": albedo},
                {"v": config.lambda_sfs * g_vert + config.lambda_mesh * g_mesh,
                 "a": config.lambda_sfs * g_alb + config.lambda_albedo * g_areg},
                state, {"v": config.lr_vertices, "a": config.lr_albedo_joint})
            verts, albedo = new["v"], np.clip(new["a"], 0.0, 1.0)
            cur = TriMesh(verts, faces, None, albedo)
            rows.append({"epoch": config.epochs_albedo + epoch, "view": -1, "L_sil": 0.0, "L_ncc": 0.0,
                         "L_sfs": l_sfs, "total": total})
    return Stage2Result(cur, lights, rows)
