"""Pipeline hyperparameters and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


_SIGNED = {"seed", "delta_ncc"}
# zero disables an optimization phase or a loss term
_NON_NEGATIVE = {
    "epochs_stage1", "epochs_albedo", "epochs_joint",
    "lambda_sil", "lambda_ncc", "lambda_sfs", "lambda_mesh", "lambda_albedo",
}


@dataclass(frozen=True)
class Config:
    grid_res_visualhull: int = 128
    grid_res_dpsr: int = 128
    sig: float = 4.0
    n_points: int = 50000
    patch_size: int = 11
    n_patches: int = 400
    n_neighbors: int = 4
    delta_ncc: float = 0.5
    delta_d: float = 0.01
    epochs_stage1: int = 10
    lambda_sil: float = 20.0
    lambda_ncc: float = 5.0
    lambda_sfs: float = 20.0
    lambda_mesh: float = 50.0
    lambda_albedo: float = 1.0
    lr_points: float = 1e-3
    lr_vertices: float = 1e-3
    lr_albedo_init: float = 1e-2
    lr_albedo_joint: float = 5e-3
    epochs_albedo: int = 200
    epochs_joint: int = 100
    resample_every: int = 2
    init_albedo: float = 0.5
    typical_ncc: bool = False
    use_ncc: bool = True
    refine_geometry: bool = True
    shared_light: bool = False
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.type not in ("int", "float") or f.name in _SIGNED:
                continue
            val = getattr(self, f.name)
            ok = val >= 0 if f.name in _NON_NEGATIVE else val > 0
            if not ok:
                raise ValueError(f"config value {f.name} must be positive, got {val}")
        if not 0.0 < self.init_albedo <= 1.0:
            raise ValueError("init_albedo must lie in (0, 1]")
        if self.patch_size % 2 != 1:
            raise ValueError(f"patch_size must be odd, got {self.patch_size}")
        if not -1.0 < self.delta_ncc < 1.0:
            raise ValueError(f"delta_ncc must lie in (-1, 1), got {self.delta_ncc}")
        res = self.grid_res_dpsr
        if res & (res - 1):
            raise ValueError(f"grid_res_dpsr must be a power of two, got {res}")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path, **overrides) -> "Config":
        """Read a flat ``key = value`` file; ``#`` starts a comment."""
        values = parse_flat(Path(path).read_text())
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "Config":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(types[key], raw, key)
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def parse_flat(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def _coerce(typ, raw, key):
    if not isinstance(raw, str):
        return raw
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None
    return raw
