"""Command line: make-synthetic, reconstruct, refine, eval and render."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import Config
from .scene import SceneError

log = logging.getLogger("mvsfs")


class CommandError(Exception):
    """A failure with a one-line diagnostic for the user."""


def _config(args) -> Config:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    if getattr(args, "grid_res", None) is not None:
        overrides["grid_res_dpsr"] = args.grid_res
    if getattr(args, "patch_size", None) is not None:
        overrides["patch_size"] = args.patch_size
    if getattr(args, "epochs", None) is not None:
        overrides["epochs_stage1"] = args.epochs
    if getattr(args, "no_ncc", False):
        overrides["use_ncc"] = False
    if getattr(args, "typical_ncc", False):
        overrides["typical_ncc"] = True
    if getattr(args, "no_sfs", False):
        overrides["refine_geometry"] = False
    try:
        if args.config:
            return Config.from_file(args.config, **overrides)
        return Config(**overrides)
    except (OSError, ValueError, TypeError) as exc:
        raise CommandError(f"config: {exc}") from None


def _load_dataset(path, config: Config):
    try:
        return io.load_dataset(path, config.n_neighbors)
    except (SceneError, OSError, ValueError) as exc:
        raise CommandError(f"dataset {path}: {exc}") from None


def _load_mesh(path):
    try:
        return io.load_mesh(path)
    except (SceneError, OSError, ValueError) as exc:
        raise CommandError(f"mesh {path}: {exc}") from None


def _load_light(path):
    from .shading import SHLight

    try:
        coeffs = np.asarray(io.read_light(path), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise CommandError(f"light {path}: {exc}") from None
    try:
        if coeffs.ndim == 2:
            return [None if np.isnan(c).all() else SHLight(c) for c in coeffs]
        return SHLight(coeffs)
    except ValueError as exc:
        raise CommandError(f"light {path}: {exc}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"output {out}: {exc}") from None
    return out


# ---------------------------------------------------------------- commands

def cmd_make_synthetic(args) -> None:
    from .shading import SHLight
    from .synthetic import SHAPES, make_scene

    if args.shape not in SHAPES:
        raise CommandError(f"unknown shape {args.shape!r}; choose from {', '.join(SHAPES)}")
    if args.views < 3:
        raise CommandError("--views must be at least 3")
    if args.resolution < 16:
        raise CommandError("--resolution must be at least 16")
    light = None
    if args.light is not None:
        if len(args.light) != 9:
            raise CommandError("--light needs exactly 9 coefficients")
        light = SHLight(args.light).coeffs
    mesh, light, dataset = make_scene(args.shape, args.views, args.resolution, light, args.detail)
    out = _out_dir(args.out)
    io.save_dataset(dataset, out)
    io.export_mesh(mesh, out / "gt_mesh.ply")
    io.write_light(out / "light.json", light.coeffs)
    log.info("wrote %d views of %s to %s", len(dataset), args.shape, out)


def cmd_reconstruct(args) -> None:
    from .optim import OptimizationError
    from .pipeline import reconstruct

    config = _config(args)
    dataset = _load_dataset(args.data, config)
    out = _out_dir(args.out)
    try:
        init, result = reconstruct(dataset, config, out / "loss_stage1.csv")
    except (OptimizationError, SceneError) as exc:
        raise CommandError(f"stage 1: {exc}") from None
    io.export_mesh(init.mesh, out / "visual_hull.ply")
    io.export_mesh(result.mesh, out / "mesh_stage1.ply")
    from .scene import TriMesh

    pts = result.points
    io.export_mesh(TriMesh(pts.positions, np.zeros((0, 3), np.int64), pts.normals), out / "points.ply")
    (out / "config.txt").write_text(config.to_text())
    log.info("stage 1 finished in %.1f s", result.seconds)


def cmd_refine(args) -> None:
    from .optim import OptimizationError, stage2_refine, write_loss_log

    config = _config(args)
    dataset = _load_dataset(args.data, config)
    mesh = _load_mesh(args.mesh)
    lights = _load_light(args.lights) if args.lights else None
    out = _out_dir(args.out)
    try:
        result = stage2_refine(mesh, dataset, config, lights)
    except (OptimizationError, SceneError, ValueError) as exc:
        raise CommandError(f"stage 2: {exc}") from None
    io.export_mesh(result.mesh, out / "mesh_refined.ply")
    coeffs = [l.to_list() if l is not None else None for l in result.lights]
    (out / "lights.json").write_text(json.dumps(coeffs, indent=1))
    write_loss_log(out / "loss_stage2.csv", result.log)


def cmd_eval(args) -> None:
    from .evalmetrics import report, write_report

    mesh = _load_mesh(args.mesh)
    gt = _load_mesh(args.gt)
    config = _config(args)
    extra = {}
    if args.data:
        from .pipeline import render_psnrs

        dataset = _load_dataset(args.data, config)
        if args.lights:
            lights = _load_light(args.lights)
            lights = lights if isinstance(lights, list) else [lights] * len(dataset)
        else:
            from .optim import estimate_lights

            lights = estimate_lights(mesh, dataset, config.shared_light, config.init_albedo)
        if mesh.vertex_albedo is None:
            raise CommandError(f"mesh {args.mesh}: PSNR needs per-vertex albedo")
        values = render_psnrs(mesh, dataset, lights)
        extra["psnr"] = {"value": float(np.nanmean(values)), "per_view": values}
    try:
        data = report(mesh, gt, args.samples, config.seed, extra)
    except SceneError as exc:
        raise CommandError(f"eval: {exc}") from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_report(args.out, data)
    print(json.dumps({k: v["value"] for k, v in data.items()}))


def cmd_render(args) -> None:
    from .shading import render_view

    mesh = _load_mesh(args.mesh)
    light = _load_light(args.light)
    if isinstance(light, list):
        if args.camera_index is None or args.camera_index >= len(light):
            raise CommandError(f"light {args.light}: per-view list needs a valid --camera-index")
        light = light[args.camera_index]
        if light is None:
            raise CommandError(f"light {args.light}: view {args.camera_index} has no usable light estimate")
    if args.camera_json:
        try:
            entry = json.loads(Path(args.camera_json).read_text())
            camera = io.camera_from_json(entry, args.camera_json)
        except (OSError, ValueError, SceneError) as exc:
            raise CommandError(f"camera {args.camera_json}: {exc}") from None
    elif args.data is not None and args.camera_index is not None:
        dataset = _load_dataset(args.data, _config(args))
        if not 0 <= args.camera_index < len(dataset):
            raise CommandError(f"--camera-index {args.camera_index} out of range for {len(dataset)} views")
        camera = dataset.views[args.camera_index].camera
    else:
        raise CommandError("render needs --camera-json or --data with --camera-index")
    if mesh.vertex_albedo is None:
        mesh = mesh.with_albedo(np.full((mesh.n_vertices, 3), 0.5))
    img, _, _ = render_view(mesh, camera, light)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_image(args.out, img)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker cap for FFTs")
    common.add_argument("--grid-res", type=int, help="Poisson grid resolution (power of two)")
    common.add_argument("--patch-size", type=int)
    common.add_argument("--epochs", type=int, help="stage-1 epochs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mvsfs", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", parents=[common], help="render an analytic test scene")
    s.add_argument("--shape", default="bumpy-sphere")
    s.add_argument("--views", type=int, default=12)
    s.add_argument("--resolution", type=int, default=256)
    s.add_argument("--light", type=float, nargs="+", help="9 SH coefficients")
    s.add_argument("--detail", type=int, default=5, help="icosphere subdivision level")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("reconstruct", parents=[common], help="visual hull and point optimization")
    s.add_argument("data")
    s.add_argument("--out", required=True)
    s.add_argument("--no-ncc", action="store_true", help="silhouette loss only")
    s.add_argument("--typical-ncc", action="store_true", help="plane-based patch warping")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("refine", parents=[common], help="albedo recovery and shading refinement")
    s.add_argument("data")
    s.add_argument("mesh")
    s.add_argument("--out", required=True)
    s.add_argument("--lights", help="JSON light (or per-view list) to use instead of estimating")
    s.add_argument("--no-sfs", action="store_true", help="recover albedo only; keep the geometry")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("eval", parents=[common], help="compare a mesh with ground truth")
    s.add_argument("mesh")
    s.add_argument("gt")
    s.add_argument("--data", help="dataset for render PSNR")
    s.add_argument("--lights", help="lights for render PSNR")
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", parents=[common], help="shade a mesh under an SH light")
    s.add_argument("mesh")
    s.add_argument("--light", required=True)
    s.add_argument("--camera-index", type=int)
    s.add_argument("--data")
    s.add_argument("--camera-json")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CommandError as exc:
        print(f"mvsfs {args.command}: {exc}", file=sys.stderr)
        return 1
    except (SceneError, ValueError, OSError) as exc:
        print(f"mvsfs {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
