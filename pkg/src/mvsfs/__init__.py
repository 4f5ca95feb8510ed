"""Multi-view reconstruction of watertight meshes with per-vertex albedo from
calibrated images and masks: visual hull, oriented-point optimization under
silhouette and patch-consistency losses, then shading-based refinement."""

from .config import Config
from .scene import Camera, MultiViewDataset, OrientedPointCloud, TriMesh, View

__all__ = ["Camera", "Config", "MultiViewDataset", "OrientedPointCloud", "TriMesh", "View"]
__version__ = "0.1.0"
