"""Command-line interface: ``sqems {fit,fit-multi,sample,synth,bench}``.

Exit codes: 0 success, 2 usage, 3 I/O, 4 parse, 5 fit failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench, io
from .ems import FitConfig, InsufficientPointsError, ems_fit
from .geometry import Pose, Superquadric, sample_surface_equidistant
from .gum import AllOutliersError
from .hier import HierarchyError, HierConfig, recover_hierarchy_multi, segment_points

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PARSE, EXIT_FIT = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _radius(text):
    return "auto" if text == "auto" else _positive_float(text)


def _levels(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_common(p, out_help):
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--format", choices=io.CLOUD_FORMATS, default=None,
                   help="cloud format (default: from the file suffix, else xyz)")
    p.add_argument("--out", default=None, help=out_help)


def _add_fit_flags(p):
    d = FitConfig()
    p.add_argument("--w-o", type=float, default=d.w_o, help=f"outlier weight w_o (default {d.w_o})")
    p.add_argument("--max-iters", type=int, default=d.max_em_iters,
                   help=f"total EM iteration budget (default {d.max_em_iters})")
    p.add_argument("--rel-tol", type=float, default=d.rel_tol_nll,
                   help=f"relative NLL decrease that ends a phase (default {d.rel_tol_nll})")
    p.add_argument("--max-switches", type=int, default=d.max_switches,
                   help=f"accepted switches before stopping (default {d.max_switches})")
    p.add_argument("--area-mode", choices=("fast", "quadrature"), default=d.area_mode,
                   help=f"surface-area evaluation (default {d.area_mode})")


def _fit_config(args) -> FitConfig:
    try:
        return FitConfig(
            max_em_iters=args.max_iters,
            rel_tol_nll=args.rel_tol,
            max_switches=args.max_switches,
            w_o=args.w_o,
            area_mode=args.area_mode,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sqems", description="Superquadric recovery from point clouds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one superquadric")
    p.add_argument("input", help="cloud file (.xyz or .ply)")
    _add_common(p, "result document path (default stdout)")
    _add_fit_flags(p)
    p.add_argument("--inliers", default=None, help="write per-point inlier probabilities here")

    p = sub.add_parser("fit-multi", help="hierarchical multi-superquadric recovery")
    p.add_argument("input", nargs="+", help="one or more cloud files, one root cluster each")
    _add_common(p, "hierarchy document path (default stdout)")
    _add_fit_flags(p)
    h = HierConfig()
    p.add_argument("--max-layers", type=int, default=h.max_layers, help=f"(default {h.max_layers})")
    p.add_argument("--prune", type=int, default=h.prune_min_points,
                   help=f"smallest outlier cluster that gets its own fit (default {h.prune_min_points})")
    p.add_argument("--cluster-radius", type=_radius, default=h.cluster_radius,
                   help="Euclidean clustering radius or 'auto' (default auto)")
    p.add_argument("--z-threshold", type=float, default=h.z_threshold,
                   help=f"inlier probability below which a point is an outlier (default {h.z_threshold})")
    p.add_argument("--labels", default=None, help="write per-point node labels (-1 unassigned) here")

    p = sub.add_parser("sample", help="sample a superquadric surface")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("document", nargs="?", help="fit, hierarchy or ground-truth document")
    src.add_argument("--params", default=None,
                     help="eps1,eps2,ax,ay,az[,qw,qx,qy,qz[,tx,ty,tz]]")
    _add_common(p, "cloud path (default stdout)")
    p.add_argument("--spacing", type=_positive_float, default=0.05, help="sample spacing (default 0.05)")

    p = sub.add_parser("synth", help="generate random superquadric clouds")
    _add_common(p, "output directory (default ./synth)")
    p.add_argument("--count", type=int, default=10, help="number of clouds (default 10)")
    p.add_argument("--spacing", type=_positive_float, default=0.2, help="sample spacing (default 0.2)")
    p.add_argument("--kind", choices=("clean",) + bench.KINDS, default="clean",
                   help="corruption applied to each cloud (default clean)")
    p.add_argument("--level", type=float, default=None,
                   help="partial ratio, outlier ratio or noise variance (defaults 0.4, 0.4, 0.01)")

    p = sub.add_parser("bench", help="run a synthetic benchmark")
    p.add_argument("kind", choices=bench.KINDS)
    p.add_argument("levels", type=_levels, help="comma-separated levels, e.g. 1.0,0.6,0.2")
    _add_common(p, "report directory (default ./bench_out)")
    _add_fit_flags(p)
    p.add_argument("--instances", type=int, default=10, help="instances per level (default 10)")
    p.add_argument("--spacing", type=_positive_float, default=0.2, help="sample spacing (default 0.2)")
    p.add_argument("--methods", default=",".join(bench.METHODS),
                   help=f"comma-separated subset of {','.join(bench.METHODS)} (default all)")
    p.add_argument("--workers", type=int, default=1, help="worker processes, capped by SQ_THREADS (default 1)")
    p.add_argument("--no-timing", action="store_true", help="omit runtimes so reports are reproducible")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _emit(text: str, path) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        io._write_text(path, text)


def cmd_fit(args) -> int:
    cfg = _fit_config(args)
    cloud = io.read_cloud(args.input, args.format)
    result = ems_fit(cloud, cfg)
    doc = io.ResultDocument.from_fit(result)
    _emit(io.dumps_document(doc), args.out)
    if args.inliers:
        io.write_column(args.inliers, result.z_hat)
    return EXIT_OK


def cmd_fit_multi(args) -> int:
    cfg = _fit_config(args)
    try:
        hcfg = HierConfig(args.max_layers, args.prune, args.z_threshold, args.cluster_radius)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    clouds = [io.read_cloud(path, args.format) for path in args.input]
    graph = recover_hierarchy_multi(clouds, cfg, hcfg)
    full = np.concatenate(clouds)
    doc = io.HierarchyDocument.from_graph(graph, len(full), segment_points(graph, full))
    _emit(io.dumps_document(doc), args.out)
    if args.labels:
        io.write_column(args.labels, doc.labels)
    return EXIT_OK


def _params_superquadric(text: str) -> Superquadric:
    try:
        v = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--params expects numbers, got {text!r}") from None
    if len(v) not in (5, 9, 12):
        raise UsageError("--params takes 5, 9 or 12 values")
    rotation = v[5:9] if len(v) >= 9 else (1.0, 0.0, 0.0, 0.0)
    translation = v[9:12] if len(v) == 12 else (0.0, 0.0, 0.0)
    try:
        return Superquadric(*v[:5], pose=Pose(rotation, translation))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_sample(args) -> int:
    if args.params is not None:
        sqs = [_params_superquadric(args.params)]
    else:
        doc = io.read_document(args.document)
        if isinstance(doc, io.HierarchyDocument):
            sqs = doc.superquadrics()
        else:
            sqs = [doc.superquadric.to_superquadric()]
    pts = np.concatenate([sample_surface_equidistant(sq, args.spacing).points for sq in sqs])
    fmt = args.format or (io.guess_format(args.out) if args.out else "xyz")
    _emit(io.format_cloud(pts, fmt), args.out)
    return EXIT_OK


_DEFAULT_LEVELS = {"clean": 1.0, "partial": 0.4, "outlier": 0.4, "noise": 0.01}


def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    kind = "partial" if args.kind == "clean" else args.kind
    level = _DEFAULT_LEVELS[args.kind] if args.level is None else args.level
    if args.kind == "clean" and level != 1.0:
        raise UsageError("--level is not used with --kind clean")
    out = args.out or "synth"
    fmt = args.format or "xyz"
    cfg = bench.BenchConfig(seed=args.seed, spacing=args.spacing)
    width = max(3, len(str(args.count - 1)))
    for i in range(args.count):
        try:
            gt, cloud, _, seed = bench.make_instance(kind, level, i, cfg)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        stem = os.path.join(out, f"shape_{i:0{width}d}")
        io.write_cloud(f"{stem}.{fmt}", cloud, fmt)
        doc = io.GroundTruthDocument(io.SuperquadricRecord.from_superquadric(gt), seed, args.kind, level, args.spacing)
        io.write_document(f"{stem}.json", doc)
    return EXIT_OK


def cmd_bench(args) -> int:
    methods = tuple(m for m in args.methods.split(",") if m)
    unknown = [m for m in methods if m not in bench.METHODS]
    if unknown or not methods:
        raise UsageError(f"unknown methods {unknown}" if unknown else "no methods given")
    if args.instances < 1 or args.workers < 1 or not args.levels:
        raise UsageError("--instances and --workers must be >= 1 and at least one level is required")
    cfg = bench.BenchConfig(
        seed=args.seed,
        spacing=args.spacing,
        methods=methods,
        fit=_fit_config(args),
        workers=args.workers,
        timing=not args.no_timing,
    )
    try:
        report = bench.run_experiment(args.kind, args.levels, args.instances, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    csv_path, json_path = bench.write_report(report, args.out or "bench_out", stem=f"{args.kind}")
    for g in report.summary["groups"]:
        err = "nan" if g["mean_error"] is None else f"{g['mean_error']:.4f}"
        print(f"{g['kind']} {g['level']:g} {g['method']}: mean error {err}, success {g['success_rate']:.2f}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


_COMMANDS = {
    "fit": cmd_fit,
    "fit-multi": cmd_fit_multi,
    "sample": cmd_sample,
    "synth": cmd_synth,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        msg, code = f"usage error: {exc}", EXIT_USAGE
    except (io.CloudParseError, io.DocumentError) as exc:
        msg, code = f"parse error: {exc}", EXIT_PARSE
    except OSError as exc:
        msg, code = f"I/O error: {exc}", EXIT_IO
    except (InsufficientPointsError, AllOutliersError, HierarchyError) as exc:
        msg, code = f"fit failed: {exc}", EXIT_FIT
    print(f"sqems: {msg}", file=sys.stderr)
    return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
