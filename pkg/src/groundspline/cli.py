"""``groundspline`` command line: fit, eval, classify, bench and synth.

Every run writes into its own directory together with ``manifest.json``
(command, materialized config, outputs, status).  Exit codes:
0 success, 2 configuration error, 3 I/O or data format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import gc
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config, to_dict
from .dataset import (Category, DatasetError, PointCloud, find_scans, load_mapping, read_labeled_scan,
                      read_scan, semantic_kitti_dirs, synth_terrain, write_labels, write_scan)
from .evaluation import (SplitSeed, asymmetry_study, classify_ground, grid_study,
                         model_study, precision_recall, robustifier_study, sweep, write_results_table)
from .gridmap import RasterSpec, rasterize
from .robust import LatticeSolver, SolverError, gnc_fit, warm_start_step
from .spline import ArtifactError, ControlGrid, grid_for_points, grid_from_bounds, load_grid, save_grid

logger = logging.getLogger("groundspline")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


# --- run directory ----------------------------------------------------------------


class Run:
    """Output directory plus the manifest that describes it."""

    def __init__(self, command: str, cfg: RunConfig, run_dir: Optional[str] = None):
        if run_dir is None:
            stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
            run_dir = os.path.join(cfg.output_dir, f"{command}-{stamp}")
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.outputs: List[str] = []
        self.summary: Dict = {}
        self.started = time.time()
        (self.dir / "config.yaml").write_text(dump_config(cfg))

    def path(self, name: str) -> Path:
        out = self.dir / name
        out.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return out

    def finish(self, status: str = "ok", error: Optional[str] = None) -> Path:
        manifest = {
            "command": self.command,
            "version": __version__,
            "status": status,
            "error": error,
            "started": _dt.datetime.fromtimestamp(self.started).isoformat(timespec="seconds"),
            "elapsed_s": round(time.time() - self.started, 3),
            "config": to_dict(self.cfg),
            "outputs": self.outputs,
            "summary": self.summary,
        }
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
        return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# --- shared pipeline pieces ---------------------------------------------------------


def dataset_dirs(cfg: RunConfig):
    ds = cfg.dataset
    if ds.scan_dir:
        return Path(ds.scan_dir), (Path(ds.label_dir) if ds.label_dir else None)
    if ds.root:
        scan_dir, label_dir = semantic_kitti_dirs(ds.root, ds.sequence)
        if ds.label_dir:
            label_dir = Path(ds.label_dir)
        return scan_dir, (label_dir if label_dir.is_dir() else None)
    raise ConfigError("dataset", "set dataset.root or dataset.scan_dir")


def load_scans(cfg: RunConfig, need_labels: bool = False) -> List[tuple]:
    """``(stem, cloud)`` pairs for the configured scan selection."""
    scan_dir, label_dir = dataset_dirs(cfg)
    if need_labels and label_dir is None:
        raise FileNotFoundError(f"label directory not found for scans in {scan_dir}")
    pairs = find_scans(scan_dir, label_dir, cfg.dataset.scans or None, cfg.dataset.stride, cfg.dataset.limit)
    if not pairs:
        raise DatasetError(f"no scans selected in {scan_dir}")
    mapping = load_mapping(cfg.dataset.mapping) if label_dir is not None else None
    out = []
    for scan, label in pairs:
        cloud = read_labeled_scan(scan, label, mapping) if label is not None else read_scan(scan)
        if cloud.n_nonfinite:
            logger.info("%s: dropped %d non-finite points", scan.name, cloud.n_nonfinite)
        out.append((scan.stem, cloud))
    return out


def make_grid(cfg: RunConfig, xy) -> ControlGrid:
    g = cfg.grid
    if g.bounds == "fixed":
        return grid_from_bounds(g.extent[:2], g.extent[2:], g.d_c, g.degree)
    return grid_for_points(xy, g.d_c, g.degree)


def fit_points(cloud: PointCloud) -> PointCloud:
    """Everything except don't-care points goes into an unsupervised fit."""
    if cloud.category is None:
        return cloud
    return cloud.subset(np.flatnonzero(~cloud.mask(Category.DONT_CARE)))


# --- commands ------------------------------------------------------------------------


def cmd_fit(cfg: RunConfig, run: Run, args) -> None:
    robust = cfg.robust.build()
    scans = load_scans(cfg)
    rows = []
    for stem, cloud in scans:
        points = fit_points(cloud)
        grid = make_grid(cfg, points.xy)
        result = gnc_fit(points, grid, robust)
        save_grid(run.path(f"surfaces/{stem}.ubs"), result.grid)
        if args.trace:
            with open(run.path(f"traces/{stem}.jsonl"), "w") as fh:
                result.write_trace(fh)
        if cfg.raster.enabled:
            lo, hi = result.grid.domain
            rasterize(result.grid, cloud, RasterSpec.covering(lo, hi, cfg.raster.cell)).write(
                run.path(f"heightmaps/{stem}.f32"))
            run.outputs.append(f"heightmaps/{stem}.f32.txt")
        rows.append({"scan": stem, "points": len(points), "control_points": grid.n_ctrl,
                     "dropped": result.n_dropped, "final_mu": result.mu,
                     "inlier_fraction": float(np.mean(result.weights > 0.5)) if len(result.weights) else 0.0})
        logger.info("fit %s: %d points, %d control points", stem, len(points), grid.n_ctrl)
    run.summary["scans"] = rows


def build_study(cfg: RunConfig, name: str):
    robust = cfg.robust.build()
    ev = cfg.evaluation
    if name == "models":
        cells = model_study(robust, cfg.baselines.calibrated())
    elif name == "robustifiers":
        cells = robustifier_study(robust, tuple(ev.modes), tuple(ev.thresholds))
    elif name == "asymmetry":
        cells = asymmetry_study(robust, tuple(ev.ratios))
    elif name == "grid":
        return [dataclasses.replace(c, degree=cfg.grid.degree, extent=_extent(cfg))
                for c in grid_study(robust, tuple(ev.grid_pairs), ev.grid_mode)]
    else:
        raise ConfigError("evaluation.studies", f"unknown study {name!r}")
    return [dataclasses.replace(c, d_c=cfg.grid.d_c, degree=cfg.grid.degree, extent=_extent(cfg),
                                robust_baselines=cfg.baselines.robust) for c in cells]


def _extent(cfg: RunConfig):
    return tuple(cfg.grid.extent) if cfg.grid.bounds == "fixed" else None


def cmd_eval(cfg: RunConfig, run: Run, args) -> None:
    scans = [cloud for _, cloud in load_scans(cfg, need_labels=True)]
    ev = cfg.evaluation
    split = SplitSeed(ev.seed, ev.fraction)
    studies = {}
    for name in ev.studies:
        reports = sweep(build_study(cfg, name), scans, split, ev.bin_width, ev.max_distance)
        write_results_table(run.path(f"results_{name}.tsv"), reports, name)
        studies[name] = [{**r.config, "model": r.model, "mae_m": None if r.error else r.mae,
                          "count": r.count, "error": r.error} for r in reports]
        for r in reports:
            cell = ",".join(f"{k}={v}" for k, v in r.config.items())
            shown = "failed: " + r.error if r.error else f"{100 * r.mae:.2f} cm"
            print(f"{name:<13} {cell:<40} {shown}")
    run.summary["n_scans"] = len(scans)
    run.summary["studies"] = studies


def cmd_classify(cfg: RunConfig, run: Run, args) -> None:
    robust = cfg.robust.build()
    surface = load_grid(args.surface) if args.surface else None
    rows = []
    for stem, cloud in load_scans(cfg):
        grid = surface
        if grid is None:
            points = fit_points(cloud)
            if cfg.classify.mode == "ground" and cloud.category is not None:
                points = cloud.subset(np.flatnonzero(cloud.mask(Category.GROUND)))
            grid = gnc_fit(points, make_grid(cfg, points.xy), robust).grid
        cls = classify_ground(grid, cloud, cfg.classify.threshold)
        write_labels(run.path(f"labels/{stem}.label"), cls.ground.astype(np.uint32))
        row = {"scan": stem, "points": len(cloud), "ground": int(cls.ground.sum()),
               "obstacle": int((~cls.ground).sum()), "out_of_domain": int(cls.out_of_domain.sum())}
        if cloud.category is not None:
            row["precision"], row["recall"] = precision_recall(cls.ground, cloud)
        rows.append(row)
    run.summary["scans"] = rows


def hardware_fingerprint() -> Dict:
    model = platform.processor() or ""
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    model = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {"cpu": model or platform.machine(), "cores": os.cpu_count(), "platform": platform.platform(),
            "python": platform.python_version(), "numpy": np.__version__}


def bench_workload(cfg: RunConfig, n_points: int, seed: int) -> PointCloud:
    from .dataset import OutlierHeights, TerrainSpec

    w, d = cfg.bench.area
    spec = TerrainSpec(ground="sine", extent=(-w / 2, -d / 2, w / 2, d / 2), n_points=n_points,
                       outlier_fraction=0.3, outliers=OutlierHeights("gamma", 1.09, 3.0), seed=seed)
    return synth_terrain(spec)


def _interleaved_min(jobs: Dict, repeats: int) -> Dict:
    """Best wall time per job; jobs alternate within each repeat so drift hits all alike."""
    best = {key: np.inf for key in jobs}
    enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            for key, fn in jobs.items():
                t0 = time.perf_counter()
                fn()
                best[key] = min(best[key], time.perf_counter() - t0)
    finally:
        if enabled:
            gc.enable()
    return best


def run_bench(cfg: RunConfig) -> Dict:
    """Warm-start rate per control point distance plus point-count scaling."""
    bench = cfg.bench
    robust = cfg.robust.build()
    w, d = bench.area
    lo, hi = (-w / 2, -d / 2), (w / 2, d / 2)
    points = bench_workload(cfg, bench.n_points, bench.seed)
    grids, jobs = {}, {}
    for d_c in bench.spacings:
        grid = grid_from_bounds(lo, hi, d_c, cfg.grid.degree)
        solver = LatticeSolver(grid, robust)
        prev = gnc_fit(points, grid, robust, solver=solver).grid
        grids[d_c] = grid
        jobs[d_c] = lambda prev=prev, solver=solver: warm_start_step(points, prev, robust, solver=solver)
    steps = _interleaved_min(jobs, bench.repeats)
    rows = [{"d_c": d_c, "control_points_area": int(round(w * d / d_c ** 2)),
             "control_points": grids[d_c].n_ctrl, "step_s": steps[d_c], "rate_hz": 1.0 / steps[d_c]}
            for d_c in bench.spacings]

    grid = grid_from_bounds(lo, hi, bench.scaling_spacing, cfg.grid.degree)
    solver = LatticeSolver(grid, robust)
    sizes = (bench.scaling_points, 2 * bench.scaling_points)
    clouds = {n: bench_workload(cfg, n, bench.seed + 1) for n in sizes}
    fits = _interleaved_min({n: (lambda c=clouds[n]: gnc_fit(c, grid, robust, solver=solver)) for n in sizes},
                            bench.scaling_repeats)
    scaling = [{"points": n, "fit_s": fits[n]} for n in sizes]
    return {"hardware": hardware_fingerprint(), "area_m": [w, d], "points": bench.n_points,
            "repeats": bench.repeats, "sweep": rows, "scaling": scaling,
            "scaling_ratio": fits[sizes[1]] / fits[sizes[0]]}


def cmd_bench(cfg: RunConfig, run: Run, args) -> None:
    report = run_bench(cfg)
    with open(run.path("bench.json"), "w") as fh:
        json.dump(report, fh, indent=2, default=_json_default)
    hw = report["hardware"]
    print(f"hardware: {hw['cpu']} ({hw['cores']} cores)")
    print(f"{'d_C':>6} {'N_C(area)':>10} {'N_C':>7} {'rate Hz':>9}")
    for r in report["sweep"]:
        print(f"{r['d_c']:6.2f} {r['control_points_area']:10d} {r['control_points']:7d} {r['rate_hz']:9.2f}")
    s = report["scaling"]
    print(f"fit time {s[0]['points']} -> {s[1]['points']} points: x{report['scaling_ratio']:.2f}")
    run.summary.update({k: report[k] for k in ("hardware", "sweep", "scaling", "scaling_ratio")})


def cmd_synth(cfg: RunConfig, run: Run, args) -> None:
    syn = cfg.synth
    seq = f"sequences/{int(syn.sequence):02d}"
    counts = {c.name.lower(): 0 for c in Category}
    for i in range(syn.n_scans):
        spec = dataclasses.replace(syn.terrain, seed=syn.terrain.seed + i)
        cloud = synth_terrain(spec)
        write_scan(run.path(f"{seq}/velodyne/{i:06d}.bin"), cloud)
        write_labels(run.path(f"{seq}/labels/{i:06d}.label"), cloud.class_id.astype(np.uint32))
        for cat, n in cloud.counts().items():
            counts[cat.name.lower()] += n
    run.summary.update({"root": str(run.dir), "sequence": syn.sequence, "n_scans": syn.n_scans,
                        "counts": counts})
    print(f"wrote {syn.n_scans} scans to {run.dir / seq}")


COMMANDS = {"fit": cmd_fit, "eval": cmd_eval, "classify": cmd_classify, "bench": cmd_bench, "synth": cmd_synth}


# --- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run configuration (defaults if omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set robust.c=0.6 (repeatable)")
    common.add_argument("--run-dir", help="output directory (default: <output_dir>/<command>-<timestamp>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="groundspline", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("fit", parents=[common], help="fit a ground surface to each scan")
    p.add_argument("--trace", action="store_true", help="write per-iteration JSON-lines traces")
    sub.add_parser("eval", parents=[common], help="holdout error studies on labeled scans")
    p = sub.add_parser("classify", parents=[common], help="write ground (1) / obstacle (0) label files")
    p.add_argument("--surface", help="use this surface artifact instead of fitting each scan")
    sub.add_parser("bench", parents=[common], help="warm-start throughput versus control point distance")
    sub.add_parser("synth", parents=[common], help="write synthetic labeled scans in SemanticKITTI layout")
    p = sub.add_parser("config", parents=[common], help="print the materialized configuration")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.command == "config":
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK

    run = None
    try:
        run = Run(args.command, cfg, args.run_dir)
        COMMANDS[args.command](cfg, run, args)
    except ConfigError as exc:
        return _fail(run, EXIT_CONFIG, f"config error: {exc}")
    except (OSError, DatasetError, ArtifactError) as exc:
        return _fail(run, EXIT_IO, f"error: {exc}")
    except (SolverError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        # Remaining ValueErrors come from fits the data cannot support (too few points, empty clouds).
        return _fail(run, EXIT_NUMERIC, f"numerical failure: {exc}")
    run.finish()
    print(f"run directory: {run.dir}")
    return EXIT_OK


def _fail(run: Optional[Run], code: int, message: str) -> int:
    print(message, file=sys.stderr)
    if run is not None:
        run.finish("failed", message)
    return code


if __name__ == "__main__":
    sys.exit(main())
