"""Combined height map: fitted ground plus per-cell obstacle height."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .dataset import PointCloud

LAYERS = ("ground", "limit", "combined")


@dataclass(frozen=True)
class RasterSpec:
    origin: Tuple[float, float]
    cell: float = 0.5
    dims: Tuple[int, int] = (200, 80)

    def __post_init__(self):
        if not self.cell > 0 or min(self.dims) < 1:
            raise ValueError(f"raster needs positive cell size and dims, got {self.cell}, {self.dims}")

    @classmethod
    def covering(cls, lo, hi, cell: float = 0.5) -> "RasterSpec":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if not np.all(hi > lo):
            raise ValueError(f"zero-area raster bounds {lo.tolist()} .. {hi.tolist()}")
        dims = np.ceil((hi - lo) / cell - 1e-9).astype(int)
        return cls(tuple(lo), cell, (int(dims[0]), int(dims[1])))

    def centers(self) -> np.ndarray:
        ix, iy = np.meshgrid(np.arange(self.dims[0]), np.arange(self.dims[1]), indexing="ij")
        return np.column_stack([
            self.origin[0] + (ix.ravel() + 0.5) * self.cell,
            self.origin[1] + (iy.ravel() + 0.5) * self.cell,
        ])


@dataclass
class HeightGrid:
    """Per-cell layers of shape ``dims``; ``limit`` is NaN where no return landed."""

    spec: RasterSpec
    ground: np.ndarray
    limit: np.ndarray

    @property
    def combined(self) -> np.ndarray:
        return np.where(np.isnan(self.limit), self.ground, self.ground + self.limit)

    def write(self, path) -> Path:
        """Write a float32 raster of the three layers plus a ``.txt`` sidecar."""
        path = Path(path)
        stack = np.stack([self.ground, self.limit, self.combined]).astype("<f4")
        path.write_bytes(stack.tobytes())
        side = path.with_suffix(path.suffix + ".txt")
        side.write_text(
            f"origin {self.spec.origin[0]:.9g} {self.spec.origin[1]:.9g}\n"
            f"cell {self.spec.cell:.9g}\n"
            f"dims {self.spec.dims[0]} {self.spec.dims[1]}\n"
            f"layers {' '.join(LAYERS)}\n"
            "dtype float32-le\norder layer,x,y\n"
        )
        return side


def read_height_grid(path) -> HeightGrid:
    path = Path(path)
    meta = {}
    for line in path.with_suffix(path.suffix + ".txt").read_text().splitlines():
        key, _, val = line.partition(" ")
        meta[key] = val.split()
    dims = (int(meta["dims"][0]), int(meta["dims"][1]))
    spec = RasterSpec((float(meta["origin"][0]), float(meta["origin"][1])), float(meta["cell"][0]), dims)
    stack = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(len(meta["layers"]), *dims)
    return HeightGrid(spec, stack[0].astype(float), stack[1].astype(float))


def rasterize(surface, cloud: PointCloud, spec: RasterSpec) -> HeightGrid:
    """Ground height at cell centers and the max return height above it per cell."""
    n_x, n_y = spec.dims
    ground = np.asarray(surface.predict(spec.centers()), dtype=float).reshape(n_x, n_y)
    limit = np.full(n_x * n_y, -np.inf)
    if len(cloud):
        ij = np.floor((cloud.xy - np.asarray(spec.origin)) / spec.cell).astype(np.int64)
        inside = (ij[:, 0] >= 0) & (ij[:, 0] < n_x) & (ij[:, 1] >= 0) & (ij[:, 1] < n_y)
        flat = ij[inside, 0] * n_y + ij[inside, 1]
        above = cloud.h[inside] - ground.ravel()[flat]
        np.maximum.at(limit, flat, above)
    limit = np.where(np.isneginf(limit), np.nan, np.maximum(limit, 0.0))
    return HeightGrid(spec, ground, limit.reshape(n_x, n_y))
