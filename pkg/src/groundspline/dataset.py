"""Point clouds, KITTI-format readers/writers and synthetic labeled terrain."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class DatasetError(ValueError):
    """Malformed scan, label or mapping file."""


class Category(enum.IntEnum):
    NON_GROUND = 0
    GROUND = 1
    DONT_CARE = 2


_CATEGORY_NAMES = {
    "ground": Category.GROUND,
    "nonground": Category.NON_GROUND,
    "non-ground": Category.NON_GROUND,
    "dontcare": Category.DONT_CARE,
    "don't-care": Category.DONT_CARE,
}


@dataclass(eq=False)
class PointCloud:
    """Plane coordinates ``xy`` (N, 2) and heights ``h`` (N,), in meters.

    ``category`` holds :class:`Category` codes when labels are known and
    ``class_id`` the raw semantic ids they came from.
    """

    xy: np.ndarray
    h: np.ndarray
    category: Optional[np.ndarray] = None
    class_id: Optional[np.ndarray] = None
    n_nonfinite: int = 0

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        if len(self.xy) != len(self.h):
            raise ValueError(f"{len(self.xy)} positions but {len(self.h)} heights")
        if self.category is not None:
            self.category = np.asarray(self.category, dtype=np.int8).reshape(-1)
            if len(self.category) != len(self.h):
                raise ValueError("category array length does not match the points")

    def __len__(self) -> int:
        return len(self.h)

    @classmethod
    def from_xyz(cls, xyz, category=None) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        return cls(xyz[:, :2], xyz[:, 2], category)

    @property
    def xyz(self) -> np.ndarray:
        return np.column_stack([self.xy, self.h])

    def subset(self, index) -> "PointCloud":
        return PointCloud(
            self.xy[index],
            self.h[index],
            None if self.category is None else self.category[index],
            None if self.class_id is None else self.class_id[index],
        )

    def mask(self, category: Category) -> np.ndarray:
        if self.category is None:
            raise ValueError("point cloud carries no labels")
        return self.category == category

    def counts(self) -> Dict[Category, int]:
        if self.category is None:
            raise ValueError("point cloud carries no labels")
        return {c: int(np.count_nonzero(self.category == c)) for c in Category}


def _read_raw_scan(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) % 16:
        full = len(data) // 16 * 16
        raise DatasetError(
            f"{path}: truncated scan, {len(data) - full} trailing bytes at offset {full}"
        )
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4)


def read_scan(path) -> PointCloud:
    """Read a KITTI velodyne scan (little-endian float32 x, y, z, intensity)."""
    raw = _read_raw_scan(path)
    ok = np.all(np.isfinite(raw[:, :3]), axis=1)
    xyz = raw[ok, :3].astype(float)
    cloud = PointCloud(xyz[:, :2], xyz[:, 2])
    cloud.n_nonfinite = int(np.count_nonzero(~ok))
    return cloud


def write_scan(path, cloud: PointCloud, intensity=None) -> None:
    out = np.zeros((len(cloud), 4), dtype="<f4")
    out[:, :2] = cloud.xy
    out[:, 2] = cloud.h
    if intensity is not None:
        out[:, 3] = intensity
    Path(path).write_bytes(out.tobytes())


def load_mapping(path=None) -> Dict[int, Category]:
    """Parse an ``id name category`` mapping file; defaults to the bundled one."""
    if path is None:
        text = resources.files(__package__).joinpath("semantic_kitti.map").read_text()
        source = "bundled mapping"
    else:
        text = Path(path).read_text()
        source = str(path)
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DatasetError(f"{source}:{lineno}: expected 'id name category', got {line!r}")
        try:
            cid = int(parts[0])
            cat = _CATEGORY_NAMES[parts[2].lower()]
        except (ValueError, KeyError):
            raise DatasetError(f"{source}:{lineno}: cannot parse {line!r}") from None
        mapping[cid] = cat
    return mapping


def read_label_ids(path, n_points: int) -> np.ndarray:
    """Semantic class ids (low 16 bits) of a SemanticKITTI label file."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) != 4 * n_points:
        raise DatasetError(
            f"{path}: holds {len(data) / 4:g} labels but the scan has {n_points} points"
        )
    return (np.frombuffer(data, dtype="<u4") & 0xFFFF).astype(np.int32)


def categorize(ids, mapping: Optional[Dict[int, Category]] = None) -> np.ndarray:
    if mapping is None:
        mapping = load_mapping()
    ids = np.asarray(ids)
    uniq, inverse = np.unique(ids, return_inverse=True)
    unknown = [int(u) for u in uniq if int(u) not in mapping]
    if unknown:
        raise DatasetError(f"class ids without a category mapping: {unknown}")
    table = np.array([mapping[int(u)] for u in uniq], dtype=np.int8)
    return table[inverse.reshape(ids.shape)]


def read_labels(path, n_points: int, mapping=None) -> np.ndarray:
    return categorize(read_label_ids(path, n_points), mapping)


def write_labels(path, ids) -> None:
    Path(path).write_bytes(np.asarray(ids, dtype="<u4").tobytes())


def read_labeled_scan(scan_path, label_path, mapping=None) -> PointCloud:
    raw = _read_raw_scan(scan_path)
    ids = read_label_ids(label_path, len(raw))
    ok = np.all(np.isfinite(raw[:, :3]), axis=1)
    xyz = raw[ok, :3].astype(float)
    cloud = PointCloud(xyz[:, :2], xyz[:, 2], categorize(ids[ok], mapping))
    cloud.class_id = ids[ok]
    cloud.n_nonfinite = int(np.count_nonzero(~ok))
    return cloud


def find_scans(scan_dir, label_dir=None, scans: Optional[Sequence[str]] = None,
               stride: int = 1, limit: Optional[int] = None) -> List[Tuple[Path, Optional[Path]]]:
    """Pair ``*.bin`` scans with ``*.label`` files of the same stem."""
    scan_dir = Path(scan_dir)
    if not scan_dir.is_dir():
        raise FileNotFoundError(f"scan directory not found: {scan_dir}")
    paths = sorted(scan_dir.glob("*.bin"))
    if scans:
        wanted = {str(s) for s in scans}
        paths = [p for p in paths if p.stem in wanted or p.name in wanted]
    paths = paths[:: max(1, int(stride))]
    if limit is not None:
        paths = paths[: int(limit)]
    pairs = []
    for p in paths:
        lab = None
        if label_dir is not None:
            lab = Path(label_dir) / (p.stem + ".label")
            if not lab.is_file():
                raise FileNotFoundError(f"label file not found: {lab}")
        pairs.append((p, lab))
    return pairs


def semantic_kitti_dirs(root, sequence: str) -> Tuple[Path, Path]:
    seq = Path(root) / "sequences" / f"{int(sequence):02d}"
    return seq / "velodyne", seq / "labels"


# --- synthetic terrain -------------------------------------------------------


@dataclass(frozen=True)
class OutlierHeights:
    """Distribution of outlier heights above the ground.

    ``gamma`` draws strictly positive heights with the given mean and shape,
    which gives the long upper tail typical of vegetation and buildings.
    """

    kind: str = "gamma"
    mean: float = 1.09
    shape: float = 2.0
    low: float = 0.5
    high: float = 3.0

    @property
    def expected_mean(self) -> float:
        if self.kind == "gamma":
            return self.mean
        if self.kind == "uniform":
            return 0.5 * (self.low + self.high)
        if self.kind == "constant":
            return self.mean
        raise ValueError(f"unknown outlier height distribution {self.kind!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gamma":
            return rng.gamma(self.shape, self.mean / self.shape, n)
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, n)
        if self.kind == "constant":
            return np.full(n, self.mean)
        raise ValueError(f"unknown outlier height distribution {self.kind!r}")


@dataclass(frozen=True)
class Box:
    """Axis-aligned solid obstacle standing on the ground."""

    x0: float
    y0: float
    x1: float
    y1: float
    height: float

    def contains(self, xy) -> np.ndarray:
        xy = np.asarray(xy)
        return (xy[:, 0] >= self.x0) & (xy[:, 0] < self.x1) & (xy[:, 1] >= self.y0) & (xy[:, 1] < self.y1)


@dataclass(frozen=True)
class TerrainSpec:
    """Recipe for a labeled synthetic scene.

    ground: ``plane`` (offset + slope . xy), ``sine`` (offset plus a product
    of sines with the given amplitude and wavelength) or ``ramp`` (offset,
    flat for x < ramp_start and rising at slope[0] beyond).
    sampling: ``uniform`` over the extent, or ``radial`` with log-uniform
    range like a spinning sensor at the origin.
    """

    ground: str = "plane"
    offset: float = 0.0
    slope: Tuple[float, float] = (0.0, 0.0)
    amplitude: float = 0.5
    wavelength: float = 25.0
    ramp_start: float = 0.0
    extent: Tuple[float, float, float, float] = (-20.0, -20.0, 20.0, 20.0)
    n_points: int = 20000
    sampling: str = "uniform"
    min_range: float = 2.5
    noise_sigma: float = 0.02
    outlier_fraction: float = 0.0
    outliers: OutlierHeights = field(default_factory=OutlierHeights)
    boxes: Tuple[Box, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError(f"outlier_fraction must lie in [0, 1], got {self.outlier_fraction}")
        if self.ground not in ("plane", "sine", "ramp"):
            raise ValueError(f"unknown ground function {self.ground!r}")
        if self.sampling not in ("uniform", "radial"):
            raise ValueError(f"unknown sampling {self.sampling!r}")


def ground_height(spec: TerrainSpec, xy) -> np.ndarray:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    x, y = xy[:, 0], xy[:, 1]
    if spec.ground == "plane":
        return spec.offset + spec.slope[0] * x + spec.slope[1] * y
    if spec.ground == "sine":
        k = 2 * np.pi / spec.wavelength
        return spec.offset + spec.amplitude * np.sin(k * x) * np.cos(0.8 * k * y)
    return spec.offset + spec.slope[0] * np.maximum(0.0, x - spec.ramp_start)


def _sample_positions(spec: TerrainSpec, rng: np.random.Generator) -> np.ndarray:
    x0, y0, x1, y1 = spec.extent
    if spec.sampling == "uniform":
        return np.column_stack([rng.uniform(x0, x1, spec.n_points), rng.uniform(y0, y1, spec.n_points)])
    r_max = float(np.hypot(max(abs(x0), abs(x1)), max(abs(y0), abs(y1))))
    out = np.empty((0, 2))
    while len(out) < spec.n_points:
        n = 2 * (spec.n_points - len(out)) + 16
        r = spec.min_range * (r_max / spec.min_range) ** rng.random(n)
        t = rng.uniform(0, 2 * np.pi, n)
        xy = np.column_stack([r * np.cos(t), r * np.sin(t)])
        keep = (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
        out = np.vstack([out, xy[keep]])
    return out[: spec.n_points]


def synth_terrain(spec: TerrainSpec) -> PointCloud:
    """Draw a labeled point cloud from ``spec``.

    Ground points carry Gaussian height noise; each point independently
    becomes an outlier with probability ``outlier_fraction`` and is lifted by
    a draw from ``spec.outliers``.  Points inside a box footprint land on the
    box roof.  ``class_id`` uses 40 (road), 70 (vegetation) and 10 (car).
    """
    rng = np.random.default_rng(spec.seed)
    xy = _sample_positions(spec, rng)
    n = len(xy)
    h = ground_height(spec, xy) + spec.noise_sigma * rng.standard_normal(n)
    is_out = rng.random(n) < spec.outlier_fraction
    h[is_out] += spec.outliers.sample(rng, int(np.count_nonzero(is_out)))
    ids = np.where(is_out, 70, 40).astype(np.int32)
    for box in spec.boxes:
        inside = box.contains(xy)
        h[inside] = ground_height(spec, xy[inside]) + box.height + spec.noise_sigma * rng.standard_normal(
            int(np.count_nonzero(inside))
        )
        ids[inside] = 10
    category = np.where(ids == 40, Category.GROUND, Category.NON_GROUND).astype(np.int8)
    cloud = PointCloud(xy, h, category)
    cloud.class_id = ids
    return cloud
