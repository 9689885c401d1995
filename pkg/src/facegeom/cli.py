"""Command-line entry point: ``facegeom <subcommand> ...``.

Exit codes: 0 success, 2 invalid input or usage, 3 solver failure. Failures
print one JSON object on standard error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from facegeom import __version__
from facegeom.errors import DimensionMismatch, FaceGeomError, InputError, SolverError
from facegeom.evaluation import aggregate_reports, error_statistics, format_table, \
    normal_discrepancy, normalize_depth_ransac
from facegeom.fixtures import KINDS, Bump, FixtureSpec, PlantedAffine, generate_fixture, \
    write_fixture
from facegeom.maps import MapPaths, load_map_stack, read_pgm_mask
from facegeom.meshio import read_mesh
from facegeom.pipeline import PipelineConfig, load_stack_depth, parse_assignment, reconstruct
from facegeom.refine import refine_mesh, write_refined_ply

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message, EXIT_INPUT)
        sys.exit(EXIT_INPUT)


def _emit_error(kind, message, code):
    payload = {"error": kind, "message": str(message), "exit_code": code}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def _add_common(p):
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--set", dest="assignments", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p.add_argument("--threads", type=int, help="worker threads, 0 = all cores")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _pipeline_config(args) -> PipelineConfig:
    overrides = [parse_assignment(a) for a in args.assignments]
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    if args.verbose:
        overrides.append({"verbosity": args.verbose})
    return PipelineConfig.load(args.config, overrides)


def cmd_reconstruct(args, refine=True):
    cfg = _pipeline_config(args)
    result = reconstruct(args.maps, args.template, args.out, cfg,
                         skip_refine=getattr(args, "skip_refine", False), refine=refine)
    for path in result.written:
        print(path)
    return EXIT_OK


def cmd_register(args):
    return cmd_reconstruct(args, refine=False)


def cmd_refine(args):
    cfg = _pipeline_config(args)
    mesh, _ = read_mesh(args.mesh)
    stack = load_map_stack(MapPaths.from_stem(args.maps))
    refined, texture = refine_mesh(mesh, stack, cfg.refine, return_texture=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_refined_ply(out, refined, texture)
    print(out)
    return EXIT_OK


def _depth_sources(path: Path):
    """``{name: path}`` for a PFM file, a map stem or a directory of either."""
    if path.is_dir():
        found = {}
        for f in sorted(path.glob("*.depth.pfm")):
            found[f.name[: -len(".depth.pfm")]] = f
        if not found:
            for f in sorted(path.glob("*.pfm")):
                found[f.stem] = f
        return found
    name = path.name
    for suffix in (".depth.pfm", ".pfm"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return {name: path}


def _read_mask(path, shape):
    if path is None:
        return None
    mask = read_pgm_mask(path)
    if mask.shape != shape:
        raise DimensionMismatch(f"mask {mask.shape} and depth {shape} differ")
    return mask


def cmd_evaluate(args):
    cfg = _pipeline_config(args)
    ev = cfg.evaluation
    if args.threshold is not None:
        ev = type(ev)(ev.iterations, ev.threshold_fraction, args.threshold, ev.seed)
    est_src = _depth_sources(args.est)
    gt_src = _depth_sources(args.gt)
    if len(est_src) == 1 and len(gt_src) == 1:
        names = [next(iter(est_src))]
        pairs = {names[0]: (next(iter(est_src.values())), next(iter(gt_src.values())))}
    else:
        names = sorted(set(est_src) & set(gt_src))
        if not names:
            raise FileNotFoundError("no matching estimate/ground-truth depth files")
        pairs = {n: (est_src[n], gt_src[n]) for n in names}

    reports, extras = {}, {}
    for name in names:
        est = load_stack_depth(pairs[name][0])
        gt = load_stack_depth(pairs[name][1])
        if est.shape != gt.shape:
            raise DimensionMismatch(f"{name}: estimate {est.shape} vs ground truth {gt.shape}")
        mask = _read_mask(args.mask, gt.shape)
        scale, shift, inl = normalize_depth_ransac(est, gt, mask, ev)
        reports[name] = error_statistics(est, gt, mask, scale, shift, inl)
        extras[name] = normal_discrepancy((est - shift) / scale, gt, mask, args.pixel_size)

    labels = None
    if args.group_by:
        if args.labels is None:
            raise FileNotFoundError("--group-by needs --labels")
        raw = json.loads(Path(args.labels).read_text(encoding="utf-8"))
        labels = {k: (v.get(args.group_by) if isinstance(v, dict) else v) for k, v in raw.items()}
    groups = aggregate_reports(reports, labels) if (labels or len(reports) > 1) else {}

    doc = {
        "samples": {n: dict(reports[n].to_dict(), normal_l1=extras[n]) for n in names},
        "groups": groups,
        "p90_definition": "mean of the largest 10% of errors; percentile90 is the 90th percentile",
        "units": "percent of ground-truth depth range",
    }
    rows = {n: reports[n] for n in names}
    rows.update({f"[{g}]": row for g, row in groups.items()})
    table = format_table(rows)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        (out / "report.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_fixtures(args):
    affine = PlantedAffine(tuple(args.rotation), tuple(args.affine_scale), tuple(args.translation))
    bump = Bump(args.bump, tuple(args.bump_center), args.bump_width)
    kw = {}
    if args.radius is not None:
        kw["radius"] = args.radius
    spec = FixtureSpec(kind=args.kind, resolution=args.res, seed=args.seed, noise=args.noise,
                       outlier_fraction=args.outliers, deformation=bump, affine=affine, **kw)
    fixture = generate_fixture(spec)
    write_fixture(fixture, args.out, stem=args.stem)
    print(Path(args.out))
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="facegeom", description="Template registration, detail refinement and depth evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, helptext in (("reconstruct", "register a template and refine detail"),
                           ("register", "affine + non-rigid template registration only")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--maps", required=True, type=Path, help="map stem (<stem>.depth.pfm ...)")
        p.add_argument("--template", required=True, type=Path, help="template PLY with ex,ey,ez")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        if name == "reconstruct":
            p.add_argument("--skip-refine", action="store_true", help="write deformed.ply only")
        _add_common(p)
        p.set_defaults(func=cmd_reconstruct if name == "reconstruct" else cmd_register)

    p = sub.add_parser("refine", help="add mesoscopic detail to a registered mesh")
    p.add_argument("--mesh", required=True, type=Path)
    p.add_argument("--maps", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output PLY")
    _add_common(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="depth error up to scale and shift")
    p.add_argument("est", type=Path, help="estimate: PFM, map stem or directory")
    p.add_argument("gt", type=Path, help="ground truth: PFM, map stem or directory")
    p.add_argument("--mask", type=Path, help="PGM mask shared by all samples")
    p.add_argument("--out", type=Path, help="directory for report.json and report.txt")
    p.add_argument("--threshold", type=float, help="inlier threshold in gt depth units")
    p.add_argument("--pixel-size", type=float, default=1.0, help="pixel size for normals")
    p.add_argument("--labels", type=Path, help="JSON {sample: label or {field: label}}")
    p.add_argument("--group-by", help="aggregate reports per label field")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fixtures", help="write an analytic test scene")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--outliers", type=float, default=0.0, help="scrambled correspondence fraction")
    p.add_argument("--bump", type=float, default=0.0, help="bump amplitude in mm")
    p.add_argument("--bump-center", type=float, nargs=2, default=(0.0, 0.0))
    p.add_argument("--bump-width", type=float, default=0.35)
    p.add_argument("--rotation", type=float, nargs=3, default=(0.0, 0.0, 0.0), help="degrees")
    p.add_argument("--affine-scale", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    p.add_argument("--translation", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.add_argument("--stem", default="sample")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if getattr(args, "threads", None) is not None:
        os.environ["FACEGEOM_THREADS"] = str(args.threads)
    try:
        return args.func(args)
    except SolverError as exc:
        _emit_error(type(exc).__name__, exc, EXIT_SOLVER)
        return EXIT_SOLVER
    except (InputError, FaceGeomError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        _emit_error(type(exc).__name__, exc, EXIT_INPUT)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
