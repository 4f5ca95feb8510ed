"""
Optimizing oriented points
==========================

Start from points sampled on the visual hull and move them so the Poisson
surface they define matches the silhouettes and looks consistent across
neighboring views. The patch term can be switched off to see what it adds.
"""

from pathlib import Path

from mvsfs import Config, io
from mvsfs.evalmetrics import chamfer_l1
from mvsfs.optim import stage1_optimize
from mvsfs.pipeline import initialize
from mvsfs.synthetic import make_scene

out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)

mesh, light, ds = make_scene("bumpy-sphere", views=12, resolution=128)

# a desk-sized setting: coarse Poisson grid, few epochs
config = Config(grid_res_visualhull=64, grid_res_dpsr=64, epochs_stage1=4)
init = initialize(ds, config)
print(f"{len(init.points)} initial points, hull Chamfer {chamfer_l1(init.mesh, mesh, 20_000):.4f}")

# silhouettes alone recover the outline but not concavities
sil_only = stage1_optimize(ds, config.replace(use_ncc=False), init.points)
print(f"silhouette only: Chamfer {chamfer_l1(sil_only.mesh, mesh, 20_000):.4f}")

# adding patch consistency pulls the surface onto the bumps
result = stage1_optimize(ds, config, init.points)
print(f"with patches:    Chamfer {chamfer_l1(result.mesh, mesh, 20_000):.4f} in {result.seconds:.0f} s")

# per-epoch losses are kept in the result log
for row in result.log[-3:]:
    print({k: round(v, 5) if isinstance(v, float) else v for k, v in row.items()})

io.export_mesh(result.mesh, out / "mesh_stage1.ply")
