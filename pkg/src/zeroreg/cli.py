"""Command-line interface: ``zeroreg {register,benchmark,synth,inspect}``.

Machine-readable JSON goes to stdout (or ``--out``); a one-line human summary
goes to stderr. Exit codes: 0 ok, 1 usage or I/O error, 2 registration
failure or insufficient data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .bench import PRESETS, generate_pair, load_specs, preset_specs, run_benchmark, _jsonable
from .bootstrap import estimate_radii, scene_shape, voxel_downsample, voxel_size_from_shape
from .errors import (ConfigError, InsufficientDataError, InvalidArgumentError, ParseError, RegistrationFailure,
                     ZeroRegError)
from .io import PipelineConfig, config_from_dict, load_cloud, load_config, resolve_threads, save_cloud
from .pipeline import register, register_lite

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

log = logging.getLogger("zeroreg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _flag(name):
    return "--" + name.replace("_", "-")


def _optional_float(text):
    if text.lower() in ("none", "null", "auto"):
        return None
    return float(text)


def _add_config_flags(parser):
    """One flag per PipelineConfig field, defaulting to 'not given'."""
    group = parser.add_argument_group("pipeline configuration (overrides --config)")
    group.add_argument("--config", type=Path, help="JSON file with configuration keys")
    for f in dataclasses.fields(PipelineConfig):
        kwargs = {"default": argparse.SUPPRESS, "dest": f"cfg_{f.name}"}
        if f.name == "sensor_origin":
            kwargs.update(nargs=3, type=float, metavar=("X", "Y", "Z"))
        elif f.name == "inlier_threshold":
            kwargs.update(type=_optional_float, help="meters; 'auto' means 2 * voxel size")
        elif f.name == "tau_n":
            kwargs.update(type=float)
        elif isinstance(f.default, bool):
            kwargs.update(type=lambda s: s.lower() in ("1", "true", "yes"))
        elif isinstance(f.default, int):
            kwargs.update(type=int)
        elif isinstance(f.default, float):
            kwargs.update(type=float)
        else:
            kwargs.update(type=str)
        group.add_argument(_flag(f.name), **kwargs)


def _effective_config(args) -> PipelineConfig:
    """File first, then flags."""
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {}
    for f in dataclasses.fields(PipelineConfig):
        if hasattr(args, f"cfg_{f.name}"):
            value = getattr(args, f"cfg_{f.name}")
            overrides[f.name] = tuple(value) if f.name == "sensor_origin" else value
    return config_from_dict(overrides, cfg) if overrides else cfg


def _emit(doc, out):
    text = json.dumps(_jsonable(doc), indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _summary(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_register(args, cfg):
    P = load_cloud(args.source, args.format)
    Q = load_cloud(args.target, args.format)
    fn = register_lite if args.mode == "lite" else register
    result = fn(P, Q, cfg)
    doc = {"command": "register", "mode": args.mode, "source": str(args.source), "target": str(args.target)}
    doc.update(result.to_dict())
    doc["config"] = cfg.to_dict()
    _emit(doc, args.out)
    _summary(f"registered {args.source} -> {args.target}: {result.inlier_count} inliers, "
             f"v = {result.voxel_size:.4g} m, early exit = {result.early_exited}, "
             f"{1e3 * result.timings.get('total', 0.0):.0f} ms")
    return EXIT_OK


def cmd_benchmark(args, cfg):
    if args.spec is not None and args.preset is not None:
        raise UsageError("give either a spec file or --preset, not both")
    if args.spec is not None:
        specs = load_specs(args.spec)
    else:
        preset = args.preset or "mixed"
        specs = preset_specs(preset, args.pairs, seed=cfg.seed, overlap=args.overlap,
                             noise_voxels=args.noise_voxels, max_rotation_deg=args.max_rotation,
                             negative=args.negative)
    if not specs:
        raise UsageError("no scene specs to run")
    workers = resolve_threads(cfg.threads) if args.parallel else 1
    report = run_benchmark(specs, cfg, args.mode, workers=workers)
    out = Path(args.out) if args.out else Path(f"benchmark-{args.mode}.json")
    json_path, csv_path = report.write(out, args.csv)
    agg = report.aggregate()
    _emit({"command": "benchmark", "report": str(json_path), "csv": str(csv_path), "aggregate": agg,
           "config": cfg.to_dict()}, None)
    _summary(f"{agg['pairs']} pairs ({args.mode}): success {100 * agg['success_rate']:.1f}%, "
             f"mean RTE {agg['mean_rte_m']:.3g} m, mean RRE {agg['mean_rre_deg']:.3g} deg, "
             f"mean wall {agg['mean_wall_ms']:.0f} ms, early exit {100 * agg['early_exit_fraction']:.0f}%")
    return EXIT_OK


def cmd_synth(args, cfg):
    spec = preset_specs(args.preset, args.index + 1, seed=cfg.seed, overlap=args.overlap,
                        noise_voxels=args.noise_voxels, max_rotation_deg=args.max_rotation,
                        negative=args.negative)[args.index]
    pair = generate_pair(spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "bin" if args.format == "kitti-bin" else "ply"
    src, tgt = out_dir / f"source.{ext}", out_dir / f"target.{ext}"
    save_cloud(pair.P, src, args.format)
    save_cloud(pair.Q, tgt, args.format)
    gt = {"command": "synth", "scene": spec.name, "scale": spec.scale, "seed": spec.seed,
          "source": str(src), "target": str(tgt), "points": [len(pair.P), len(pair.Q)],
          "noise_sigma_m": pair.noise, "overlap": spec.overlap, "negative": spec.negative,
          "T_gt": pair.T_gt.as_matrix().tolist(), "config": cfg.to_dict()}
    (out_dir / "ground_truth.json").write_text(json.dumps(gt, indent=2) + "\n")
    _emit(gt, None)
    _summary(f"wrote {src} ({len(pair.P)} pts) and {tgt} ({len(pair.Q)} pts)")
    return EXIT_OK


def cmd_inspect(args, cfg):
    cloud = load_cloud(args.cloud, args.format)
    pts = cloud.points
    shape = scene_shape(pts, cfg.delta_v, cfg.seed)
    branch = "spheric" if shape.sphericity >= cfg.tau_v else "disc"
    v = voxel_size_from_shape(shape, cfg)
    down = voxel_downsample(pts, v)
    radii = estimate_radii(down, cfg, cfg.seed)
    doc = {"command": "inspect", "path": str(args.cloud), "points": len(pts), "voxels": len(down),
           "eigenvalues": list(shape.eigenvalues), "sphericity": shape.sphericity, "spread_m": shape.spread,
           "branch": branch, "voxel_size": v,
           "radii": {"r_l": radii.local, "r_m": radii.middle, "r_g": radii.global_}, "config": cfg.to_dict()}
    _emit(doc, args.out)
    _summary(f"{args.cloud}: {len(pts)} pts, sphericity {shape.sphericity:.3g}, s = {shape.spread:.4g} m, "
             f"{branch} branch, v = {v:.4g} m, radii {radii.local:.3g}/{radii.middle:.3g}/{radii.global_:.3g} m")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="zeroreg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("register", help="register SOURCE onto TARGET")
    p.add_argument("source", type=Path)
    p.add_argument("target", type=Path)
    p.add_argument("--mode", choices=("full", "lite"), default="full")
    p.add_argument("--format", choices=("auto", "ply", "kitti-bin"), default="auto")
    p.add_argument("--out", type=Path, help="write the JSON document here instead of stdout")
    _add_config_flags(p)
    p.set_defaults(func=cmd_register)

    def scene_flags(q):
        q.add_argument("--overlap", type=float, default=0.7)
        q.add_argument("--noise-voxels", type=float, default=0.5, help="noise sigma as a multiple of v")
        q.add_argument("--max-rotation", type=float, default=180.0, help="degrees")
        q.add_argument("--negative", action="store_true", help="target from an unrelated scene")

    p = sub.add_parser("benchmark", help="run the synthetic benchmark")
    p.add_argument("spec", nargs="?", type=Path, help="JSON scene-spec file (alternative to --preset)")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--mode", choices=("full", "lite"), default="full")
    p.add_argument("--out", type=Path, help="report JSON path (default benchmark-<mode>.json)")
    p.add_argument("--csv", type=Path, help="per-pair CSV path (default: next to the JSON)")
    p.add_argument("--parallel", action="store_true", help="run pairs in worker processes (--threads of them)")
    scene_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("synth", help="write one synthetic pair and its ground truth")
    p.add_argument("--preset", choices=("object", "indoor", "outdoor"), default="indoor")
    p.add_argument("--index", type=int, default=0, help="pair index within the seeded preset sequence")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--format", choices=("ply", "ply-ascii", "kitti-bin"), default="ply")
    scene_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="print bootstrapping diagnostics for a cloud")
    p.add_argument("cloud", type=Path)
    p.add_argument("--format", choices=("auto", "ply", "kitti-bin"), default="auto")
    p.add_argument("--out", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _effective_config(args)
        if getattr(args, "pairs", 1) < 1:
            raise UsageError("--pairs must be >= 1")
        return args.func(args, cfg)
    except UsageError as exc:
        _summary(f"usage error: {exc}")
        return EXIT_USAGE
    except (ConfigError, ParseError, InvalidArgumentError) as exc:
        _summary(f"error: {exc}")
        return EXIT_USAGE
    except OSError as exc:
        _summary(f"I/O error: {exc}")
        return EXIT_USAGE
    except RegistrationFailure as exc:
        _summary(f"registration failed: {exc}")
        return EXIT_FAILURE
    except InsufficientDataError as exc:
        _summary(f"insufficient data: {exc}")
        return EXIT_FAILURE
    except ZeroRegError as exc:
        _summary(f"error: {exc}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
