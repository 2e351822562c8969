"""Command-line entry point: ``lfalloc <command> ...``.

Reports are JSON, tables and schedules are CSV. Exit status is 0 on success,
2 for usage errors, and the error family's code otherwise (3 input, 4 solver,
5 encoder backend).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import replace

from . import __version__
from .allocator import profile_defaults
from .backends import AdapterConfig, ExternalBackend, MockBackend, MockScene, generate_mock_scene
from .errors import InputError, LfallocError
from .grid import (DEFAULT_SCAN, SCAN_KINDS, ConfidenceGrid, SaiGridDims, build_scan_order, load_confidence,
                   plateau_confidence)
from .metrics import quality_report, read_yuv420, frame_mse, combine_channels, bd_rate
from .pipeline import (BASELINE, BUDGET_PRESETS, OPTIMIZED, PassOneCache, PassOneStats, TwoPassConfig,
                       TwoPassReport, allocate_and_plan, compare_runs, first_pass, preset_scene_spec,
                       run_budgets)
from .rdmodel import fit_models, select_fit_window


def _emit(text: str, out) -> None:
    if out:
        folder = os.path.dirname(os.path.abspath(out))
        os.makedirs(folder, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _parse_grid(text):
    try:
        k, l = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 9x9, got {text!r}") from None
    return k, l


def _geometry(args, frame_count: int):
    """Confidence grid and scan order from --confidence/--grid/--scan-order."""
    conf = None
    source = getattr(args, "confidence", None) or "uniform"
    if source not in ("uniform", "plateau"):
        conf = load_confidence(source)
    if conf is not None:
        rows, cols = conf.values.shape
    elif getattr(args, "grid", None):
        rows, cols = args.grid
    else:
        side = math.isqrt(frame_count)
        if side * side != frame_count:
            raise InputError(f"{frame_count} frames is not a square grid; pass --grid ROWSxCOLS")
        rows = cols = side
    if conf is None:
        conf = plateau_confidence(rows, cols) if source == "plateau" else ConfidenceGrid.uniform(rows, cols)
    scan = build_scan_order(args.scan_order, SaiGridDims(rows, cols), frame_count, getattr(args, "scan_mapping", None))
    return conf, scan


def _backend(args, frame_count=None):
    if args.backend == "external":
        if not args.adapter:
            raise InputError("--backend external needs --adapter CONFIG.json")
        return ExternalBackend(AdapterConfig.load(args.adapter))
    if args.scene:
        return MockBackend(MockScene.load(args.scene))
    if frame_count is None:
        raise InputError("mock backend needs --scene or --frames")
    return MockBackend(generate_mock_scene(preset_scene_spec(args.profile, frame_count, args.seed, args.sigma)))


# -- commands ----------------------------------------------------------------

def cmd_mockgen(args):
    spec = preset_scene_spec(args.profile, args.frames, args.seed, args.sigma)
    if args.exponent_range:
        spec = replace(spec, exponent_range=tuple(args.exponent_range))
    scene = generate_mock_scene(spec)
    _emit(json.dumps(scene.to_dict(), indent=2), args.out)


def cmd_firstpass(args):
    backend = _backend(args, args.frames)
    stats = first_pass(backend, profile_defaults(args.profile), args.frames, args.parallel)
    _emit(stats.to_csv(), args.out)


def _load_stats(args):
    return PassOneStats.from_csv(args.stats, profile_defaults(args.profile).kind)


def _fit(args, stats):
    prof = profile_defaults(args.profile)
    samples = stats.sample_set(args.luma_only)
    window, bounds = select_fit_window(samples, args.budget, prof.sweep_qps)
    n = stats.frame_count
    models = fit_models(window, prof.grouping(n) if prof.per_gop else None, n)
    return samples, models, bounds


def cmd_fit(args):
    stats = _load_stats(args)
    _, models, bounds = _fit(args, stats)
    doc = {"profile": profile_defaults(args.profile).kind, "budget": args.budget, "fit_window": list(bounds),
           "models": [m.to_dict() for m in models]}
    _emit(json.dumps(doc, indent=2), args.out)


def cmd_allocate(args):
    stats = _load_stats(args)
    samples, models, bounds = _fit(args, stats)
    conf, scan = _geometry(args, stats.frame_count)
    config = TwoPassConfig(args.profile, args.smooth_weight, (), conf, scan, mode=BASELINE if args.baseline else OPTIMIZED)
    _, x, schedule, info = allocate_and_plan(config, models, samples, args.budget)
    if args.out:
        schedule.write_csv(args.out)
    summary = {"budget": args.budget, "fit_window": list(bounds), "allocation": [float(v) for v in x],
               "solver": info, **schedule.to_dict()}
    _emit(json.dumps(summary, indent=2), args.summary)


def _config_from_file(path) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise InputError("config must be a JSON object")
    return doc


def _summary_csv(reports) -> str:
    buf = io.StringIO()
    table = csv.writer(buf, lineterminator="\n")
    table.writerow(["mode", "lambda", "budget", "achieved_bits", "bit_error", "wmse", "sp", "target", "target_db"])
    for r in reports:
        q = r.quality
        table.writerow([r.mode, r.smooth_weight, r.budget, r.achieved_bits, r.bit_error, q.wmse, q.sp, q.target, q.target_db])
    return buf.getvalue()


def cmd_twopass(args):
    cfg = _config_from_file(args.config)
    # explicit flags win over the config file, which wins over the defaults
    for attr, key, default in (("profile", "profile", "ai"), ("smooth_weight", "lambda", 0.0),
                               ("scan_order", "scan_order", DEFAULT_SCAN), ("confidence", "confidence", "uniform"),
                               ("parallel", "parallel", 1), ("seed", "seed", 0), ("sigma", "sigma", 0.0),
                               ("frames", "frames", None), ("scene", "scene", None),
                               ("backend", "backend", "mock"), ("adapter", "adapter", None),
                               ("cache_dir", "cache_dir", None), ("scan_mapping", "scan_mapping", None)):
        if getattr(args, attr) is None:
            setattr(args, attr, cfg.get(key, default))
    if args.grid is None and "grid" in cfg:
        args.grid = tuple(cfg["grid"])
    budgets = args.budget or cfg.get("budgets") or BUDGET_PRESETS[profile_defaults(args.profile).short]
    backend = _backend(args, args.frames)
    conf, scan = _geometry(args, args.frames or backend.frame_count)
    cache = PassOneCache(args.cache_dir)
    modes = [BASELINE] if args.baseline else [OPTIMIZED]
    if args.with_baseline:
        modes = [OPTIMIZED, BASELINE]
    reports = []
    for mode in modes:
        config = TwoPassConfig(args.profile, args.smooth_weight, tuple(budgets), conf, scan, args.parallel,
                               args.luma_only or bool(cfg.get("luma_only", False)), mode)
        reports.extend(run_budgets(config, backend, cache))
    doc = [r.to_dict(include_timing=not args.no_timing) for r in reports]
    _emit(json.dumps(doc, indent=2, sort_keys=True), args.out)
    table = _summary_csv(reports)
    if args.out:
        _emit(table, os.path.splitext(args.out)[0] + ".csv")
    else:
        sys.stderr.write(table)
    if args.figures:
        from .plotting import report_figures
        for path in report_figures(reports, args.figures):
            sys.stderr.write(f"wrote {path}\n")


def _read_mse_csv(path):
    """``frame_index,mse_y,mse_u,mse_v`` rows, 1-based, optional header."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                f, y, u, v = int(row[0]), float(row[1]), float(row[2]), float(row[3])
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise InputError(f"{path} line {lineno}: expected frame_index,mse_y,mse_u,mse_v") from None
            rows[f - 1] = (y, u, v)
    if sorted(rows) != list(range(len(rows))) or not rows:
        raise InputError(f"{path} must list frames 1..n exactly once")
    return [rows[i] for i in range(len(rows))]


def cmd_metrics(args):
    if args.mse:
        channels = _read_mse_csv(args.mse)
    elif args.reference and args.distorted:
        if not args.frame_size:
            raise InputError("YUV input needs --frame-size WxH")
        width, height = args.frame_size
        dims = SaiGridDims(1, 1, height, width)
        channels = [tuple(frame_mse(a, b) for a, b in zip(ref, dist))
                    for ref, dist in zip(read_yuv420(args.reference, dims), read_yuv420(args.distorted, dims))]
    else:
        raise InputError("metrics needs --mse CSV or --reference/--distorted YUV files")
    per_frame = [y if args.luma_only else combine_channels(y, u, v) for y, u, v in channels]
    conf, scan = _geometry(args, len(per_frame))
    report = quality_report(scan.to_grid(per_frame), conf, args.smooth_weight)
    _emit(report.to_json(), args.out)
    if args.figures:
        from .plotting import plot_sai_heatmap
        plot_sai_heatmap(report.per_sai_mse, os.path.join(args.figures, "per_sai_mse.png"))


def _read_curve(path):
    pts = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                pts.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise InputError(f"{path} line {lineno}: expected bits,quality") from None
    return pts


def cmd_bdrate(args):
    value = bd_rate(_read_curve(args.anchor), _read_curve(args.test))
    _emit(json.dumps({"bd_rate_percent": value}), args.out)


def _load_reports(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return [TwoPassReport.from_dict(d) for d in (doc if isinstance(doc, list) else [doc])]


def cmd_compare(args):
    test = _load_reports(args.test)
    anchor = _load_reports(args.anchor)
    cmp = compare_runs(test, anchor)
    as_json = args.out is not None and args.out.endswith(".json")
    _emit(cmp.to_json() if as_json else cmp.to_csv(), args.out)
    if args.figures:
        from .plotting import plot_rd_curves
        curves = {"anchor": [(r.achieved_bits, r.quality.target_db) for r in anchor],
                  "test": [(r.achieved_bits, r.quality.target_db) for r in test]}
        plot_rd_curves(curves, os.path.join(args.figures, "compare_rd.png"), f"BD-rate {cmp.bd_rate:.2f}%")


# -- parser -------------------------------------------------------------------

def _add_geometry(p, defaults=True):
    p.add_argument("--confidence", default="uniform" if defaults else None,
                   help="confidence CSV (one line per grid row), or 'uniform' / 'plateau'")
    p.add_argument("--grid", type=_parse_grid, help="angular grid ROWSxCOLS when no confidence file is given")
    p.add_argument("--scan-order", dest="scan_order", default=DEFAULT_SCAN if defaults else None, choices=SCAN_KINDS)
    p.add_argument("--scan-mapping", dest="scan_mapping", help="frame_index,k,l CSV for --scan-order custom")


def _add_backend(p, defaults=True):
    p.add_argument("--backend", default="mock" if defaults else None, choices=("mock", "external"))
    p.add_argument("--scene", help="mock scene JSON (from mockgen)")
    p.add_argument("--adapter", help="external encoder adapter config JSON")
    p.add_argument("--frames", type=int, help="frame count for a generated mock scene")
    p.add_argument("--seed", type=int, default=0 if defaults else None)
    p.add_argument("--sigma", type=float, default=0.0 if defaults else None,
                   help="log-noise of a generated mock scene")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfalloc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    profile = dict(default="ai", choices=("ai", "ra", "ld"))

    p = sub.add_parser("mockgen", help="emit a synthetic scene")
    p.add_argument("--profile", **profile)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--exponent-range", dest="exponent_range", type=float, nargs=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mockgen)

    p = sub.add_parser("firstpass", help="run the QP sweep and write its statistics")
    p.add_argument("--profile", **profile)
    _add_backend(p)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_firstpass)

    for name, func, text in (("fit", cmd_fit, "fit R-D models for one budget"),
                             ("allocate", cmd_allocate, "fit, allocate and plan QPs for one budget")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--stats", required=True, help="first-pass CSV")
        p.add_argument("--profile", **profile)
        p.add_argument("--budget", type=float, required=True)
        p.add_argument("--luma-only", dest="luma_only", action="store_true")
        p.add_argument("--out")
        if name == "allocate":
            p.add_argument("--lambda", dest="smooth_weight", type=float, default=0.0)
            p.add_argument("--baseline", action="store_true", help="equal split instead of the optimizer")
            p.add_argument("--summary", help="JSON summary path (default stdout)")
            _add_geometry(p)
        p.set_defaults(func=func)

    p = sub.add_parser("twopass", help="full two-pass run over one or more budgets")
    p.add_argument("--config", help="JSON config; explicit flags override it")
    p.add_argument("--profile", choices=("ai", "ra", "ld"))
    p.add_argument("--budget", type=float, action="append", help="repeat for several budgets")
    p.add_argument("--lambda", dest="smooth_weight", type=float)
    p.add_argument("--baseline", action="store_true", help="uniform-allocation baseline only")
    p.add_argument("--with-baseline", dest="with_baseline", action="store_true",
                   help="run the optimizer and the baseline")
    p.add_argument("--parallel", type=int)
    p.add_argument("--luma-only", dest="luma_only", action="store_true")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--no-timing", dest="no_timing", action="store_true")
    p.add_argument("--figures", help="directory for PNG figures")
    p.add_argument("--out", help="report JSON; a summary CSV is written next to it")
    _add_backend(p, defaults=False)
    _add_geometry(p, defaults=False)
    p.set_defaults(func=cmd_twopass)

    p = sub.add_parser("metrics", help="wMSE, SP, T and T' of one coded sequence")
    p.add_argument("--mse", help="frame_index,mse_y,mse_u,mse_v CSV")
    p.add_argument("--reference")
    p.add_argument("--distorted")
    p.add_argument("--frame-size", dest="frame_size", type=_parse_grid, help="WxH of the 4:2:0 frames")
    p.add_argument("--lambda", dest="smooth_weight", type=float, default=0.0)
    p.add_argument("--luma-only", dest="luma_only", action="store_true")
    p.add_argument("--figures")
    p.add_argument("--out")
    _add_geometry(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("bdrate", help="BD-rate between two bits,quality curves")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("compare", help="BD-rate table of two twopass report files")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--figures")
    p.add_argument("--out", help="table path; .json for JSON, CSV otherwise")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except LfallocError as exc:
        sys.stderr.write(f"lfalloc {args.command}: {exc}\n")
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"lfalloc {args.command}: {exc}\n")
        return InputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
