"""Run configuration: a versioned YAML tree mapped onto nested dataclasses.

Every key is optional.  Omitted keys take the defaults below, which are the
method defaults (TLS, c = 0.4 m, 10 iterations, r_asymm = 2, degree 2,
d_C = 2 m, w_S = 1, smoothness order 2).
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .baselines import CalibratedPlane
from .dataset import Box, OutlierHeights, TerrainSpec
from .robust import RobustConfig, Robustifier

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key that failed."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


@dataclass
class DatasetSection:
    """Where scans come from.

    ``root`` + ``sequence`` select a SemanticKITTI style layout
    (``root/sequences/NN/velodyne`` and ``.../labels``); explicit
    ``scan_dir``/``label_dir`` take precedence.
    """

    root: Optional[str] = None
    sequence: str = "08"
    scan_dir: Optional[str] = None
    label_dir: Optional[str] = None
    scans: List[str] = field(default_factory=list)
    stride: int = 1
    limit: Optional[int] = None
    mapping: Optional[str] = None


@dataclass
class GridSection:
    """Control lattice.  ``bounds="points"`` fits the lattice to each scan,
    ``bounds="fixed"`` uses ``extent = [x0, y0, x1, y1]``."""

    d_c: float = 2.0
    degree: int = 2
    bounds: str = "points"
    extent: Tuple[float, float, float, float] = (-50.0, -20.0, 50.0, 20.0)


@dataclass
class RobustSection:
    robustifier: str = "tls"
    c: float = 0.4
    mu0: Optional[float] = None
    alpha: Optional[float] = None
    max_iters: int = 10
    r_asymm: float = 2.0
    w_s: float = 1.0
    smoothness_order: int = 2
    ridge_eps: float = 1e-9

    def build(self) -> RobustConfig:
        return RobustConfig(Robustifier(self.robustifier), self.c, self.mu0, self.alpha, self.max_iters,
                            self.r_asymm, self.w_s, self.smoothness_order, self.ridge_eps)


@dataclass
class EvaluationSection:
    """Holdout protocol and which studies ``eval`` runs.

    studies: any of ``models``, ``robustifiers``, ``asymmetry``, ``grid``.
    """

    seed: int = 0
    fraction: float = 0.10
    bin_width: float = 5.0
    max_distance: float = 50.0
    studies: List[str] = field(default_factory=lambda: ["models"])
    modes: List[str] = field(default_factory=lambda: ["ground", "all"])
    thresholds: List[float] = field(default_factory=lambda: [1.0, 0.6, 0.4, 0.2])
    ratios: List[float] = field(default_factory=lambda: [2.5, 2.0, 1.5, 1.0])
    grid_pairs: List[Tuple[float, float]] = field(
        default_factory=lambda: [(2.0, 1.0), (2.0, 2.0), (2.0, 10.0), (5.0, 2.0), (5.0, 5.0),
                                 (5.0, 10.0), (10.0, 1.0), (10.0, 5.0), (10.0, 10.0)])
    grid_mode: str = "all"


@dataclass
class ClassifySection:
    threshold: float = 0.10
    mode: str = "all"


@dataclass
class BaselinesSection:
    robust: bool = False
    calibrated_height: float = -1.73
    calibrated_slope: Tuple[float, float] = (0.0, 0.0)

    def calibrated(self) -> CalibratedPlane:
        return CalibratedPlane(self.calibrated_height, *self.calibrated_slope)


@dataclass
class BenchSection:
    """Warm-start throughput sweep over a fixed synthetic area.

    The rate sweep uses ``n_points`` per scan; the point-count scaling check
    fits ``scaling_points`` and twice as many on the ``scaling_spacing`` grid.
    """

    area: Tuple[float, float] = (150.0, 100.0)
    spacings: List[float] = field(default_factory=lambda: [1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0])
    n_points: int = 10000
    repeats: int = 21
    scaling_points: int = 60000
    scaling_spacing: float = 2.0
    scaling_repeats: int = 5
    seed: int = 0


@dataclass
class RasterSection:
    enabled: bool = False
    cell: float = 0.5


@dataclass
class SynthSection:
    """Scenes written by ``synth``; scan ``i`` uses ``terrain.seed + i``."""

    n_scans: int = 10
    sequence: str = "00"
    terrain: TerrainSpec = field(default_factory=lambda: TerrainSpec(
        ground="sine", extent=(-40.0, -40.0, 40.0, 40.0), n_points=60000, sampling="radial",
        outlier_fraction=0.3, outliers=OutlierHeights("gamma", 1.09, 3.0)))


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    output_dir: str = "runs"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    grid: GridSection = field(default_factory=GridSection)
    robust: RobustSection = field(default_factory=RobustSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    classify: ClassifySection = field(default_factory=ClassifySection)
    baselines: BaselinesSection = field(default_factory=BaselinesSection)
    bench: BenchSection = field(default_factory=BenchSection)
    raster: RasterSection = field(default_factory=RasterSection)
    synth: SynthSection = field(default_factory=SynthSection)


# --- conversion -----------------------------------------------------------------


def _coerce(tp, value, path: str, base=None):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path, base)
    if origin in (list, tuple):
        if isinstance(value, (str, bytes)) or not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        if origin is tuple and not (len(args) == 2 and args[1] is Ellipsis):
            if len(value) != len(args):
                raise ConfigError(path, f"expected {len(args)} items, got {len(value)}")
            return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
        item = args[0]
        out = [_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return str(value)
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp!r}")


def _default_instance(cls):
    try:
        return cls()
    except TypeError:
        return None


def _build(cls, data, path: str, base=None):
    """Instantiate ``cls`` from ``data``; missing keys keep the values of ``base``."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, "unknown key")
    if base is None:
        base = _default_instance(cls)
    kwargs = {}
    for name in names & set(data):
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(hints[name], data[name], sub, getattr(base, name, None))
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _validate(cfg: RunConfig) -> None:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {cfg.schema_version}, expected {SCHEMA_VERSION}")
    try:
        cfg.robust.build()
    except ValueError as exc:
        raise ConfigError("robust", str(exc)) from exc
    if not cfg.grid.d_c > 0:
        raise ConfigError("grid.d_c", f"must be positive, got {cfg.grid.d_c}")
    if cfg.grid.degree < 1:
        raise ConfigError("grid.degree", f"must be at least 1, got {cfg.grid.degree}")
    if cfg.grid.bounds not in ("points", "fixed"):
        raise ConfigError("grid.bounds", f"expected 'points' or 'fixed', got {cfg.grid.bounds!r}")
    x0, y0, x1, y1 = cfg.grid.extent
    if not (x1 > x0 and y1 > y0):
        raise ConfigError("grid.extent", f"zero-area extent {list(cfg.grid.extent)}")
    if not 0.0 < cfg.evaluation.fraction < 1.0:
        raise ConfigError("evaluation.fraction", f"must lie in (0, 1), got {cfg.evaluation.fraction}")
    if not cfg.evaluation.bin_width > 0:
        raise ConfigError("evaluation.bin_width", "must be positive")
    for i, s in enumerate(cfg.evaluation.studies):
        if s not in ("models", "robustifiers", "asymmetry", "grid"):
            raise ConfigError(f"evaluation.studies[{i}]", f"unknown study {s!r}")
    for i, m in enumerate(cfg.evaluation.modes):
        if m not in ("ground", "all"):
            raise ConfigError(f"evaluation.modes[{i}]", f"unknown mode {m!r}")
    for key in ("grid_mode",):
        if getattr(cfg.evaluation, key) not in ("ground", "all"):
            raise ConfigError(f"evaluation.{key}", "expected 'ground' or 'all'")
    if cfg.classify.mode not in ("ground", "all"):
        raise ConfigError("classify.mode", "expected 'ground' or 'all'")
    if not cfg.classify.threshold > 0:
        raise ConfigError("classify.threshold", "must be positive")
    if cfg.dataset.stride < 1:
        raise ConfigError("dataset.stride", "must be at least 1")
    if not all(s > 0 for s in cfg.bench.spacings) or not cfg.bench.spacings:
        raise ConfigError("bench.spacings", "needs at least one positive spacing")
    if min(cfg.bench.repeats, cfg.bench.n_points, cfg.bench.scaling_points, cfg.bench.scaling_repeats) < 1:
        raise ConfigError("bench", "repeats and point counts must be positive")
    if not cfg.raster.cell > 0:
        raise ConfigError("raster.cell", "must be positive")
    if cfg.synth.n_scans < 1:
        raise ConfigError("synth.n_scans", "must be at least 1")


def from_dict(data: Dict[str, Any]) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    _validate(cfg)
    return cfg


def to_dict(cfg: RunConfig) -> Dict[str, Any]:
    """Plain nested dict with every default materialized."""
    return _plain(cfg)


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"not valid YAML: {exc}") from exc
    return from_dict(data or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (defaults only when ``None``) and apply ``key.path=value`` overrides."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"config file not found: {path}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("", f"{path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("", f"{path} must contain a mapping at the top level")
    for item in overrides:
        apply_override(data, item)
    return from_dict(data)


def apply_override(data: Dict[str, Any], item: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as YAML."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(key, f"override {item!r} is not of the form key.path=value")
    parts = key.strip().split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ConfigError(".".join(parts[: i + 1]), "cannot set a key below a scalar")
        node = nxt
    try:
        node[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(key, f"cannot parse value {raw!r}") from exc


__all__ = [
    "SCHEMA_VERSION", "ConfigError", "RunConfig", "DatasetSection", "GridSection", "RobustSection",
    "EvaluationSection", "ClassifySection", "BaselinesSection", "BenchSection", "RasterSection",
    "SynthSection", "Box", "from_dict", "to_dict", "parse_config", "dump_config", "load_config",
    "apply_override",
]
