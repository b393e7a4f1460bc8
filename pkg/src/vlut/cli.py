"""Command-line pipeline: simulate datasets, calibrate tables, restore, evaluate."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluate, lut as lutmod, simulate
from .dataset import FrameLoadError, FrameManifest, extract_calibration_data
from .constraints import UnconstrainedSystemError
from .lut import FrustumSpec, LutFormatError
from .restore import RestoreOptions, restore_batch
from .solver import InvalidAnchorError, SolveOptions, calibrate_hierarchical, fix_scale

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _parse_pyramid(text: str) -> list[tuple[int, int, int]]:
    levels = []
    for part in text.split(","):
        dims = part.lower().split("x")
        if len(dims) != 3:
            raise ValueError(f"bad pyramid level {part!r}, expected NXxNYxNZ")
        levels.append(tuple(int(d) for d in dims))
    return levels


def _parse_triple(text: str, cast=float) -> tuple:
    parts = [cast(v) for v in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fill values from --config JSON for options not given on the command line."""
    if not getattr(args, "config", None):
        return
    with open(args.config) as fh:
        config = json.load(fh)
    for key, value in config.items():
        dest = key.replace("-", "_")
        if hasattr(args, dest) and getattr(args, dest) == parser.get_default(dest):
            setattr(args, dest, value)


def cmd_simulate(args, parser) -> int:
    _apply_config(args, parser)
    out = Path(args.out)
    manifest = simulate.make_dataset(args.recipe, out, seed=args.seed,
                                     noise_sigma=args.noise, quantize=args.quantize)
    print(f"wrote {len(manifest.frames)} frames to {out} (recipe {args.recipe}, seed {args.seed})")
    return 0


def cmd_calibrate(args, parser) -> int:
    _apply_config(args, parser)
    manifest = FrameManifest.load(args.manifest)
    meta = manifest.metadata
    z_near = args.z_near if args.z_near is not None else meta.get("z_near")
    z_far = args.z_far if args.z_far is not None else meta.get("z_far")
    if z_near is None or z_far is None:
        print("error: --z-near/--z-far not given and not present in the manifest",
              file=sys.stderr)
        return USAGE_ERROR
    schedule = _parse_pyramid(args.pyramid)
    in_air = args.in_air or meta.get("mode") == "in_air"
    frustum = FrustumSpec(float(z_near), float(z_far), *schedule[-1], manifest.intrinsics)
    opts = SolveOptions(schedule=schedule, mode=args.mode,
                        estimate_beta=not in_air,
                        medium="in_air" if in_air else "water",
                        use_pure_water=not args.no_pure_water,
                        max_iterations=args.max_iterations)
    if args.mode == "correspondence_only" and not in_air:
        print("warning: correspondence-only calibration under water is experimental; "
              "the multiplicative/additive split may not be identifiable", file=sys.stderr)
    data = extract_calibration_data(manifest, frustum, stride=args.stride,
                                    use_correspondences=(args.mode == "correspondence_only"),
                                    superpixels=args.superpixels)
    table, report = calibrate_hierarchical(data, frustum, opts)
    if args.anchor_voxel is not None and args.anchor_alpha is not None:
        voxel = _parse_triple(args.anchor_voxel, int)
        alpha = np.asarray(_parse_triple(args.anchor_alpha, float))
        table = fix_scale(table, voxel, alpha)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lutmod.save(table, out / "lut.vlut")
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    print(f"{'level':<12}{'initial cost':>16}{'final cost':>16}{'iters':>8}{'accepted':>10}")
    for level in report.levels:
        iters = sum(c.iterations for c in level.channels)
        accepted = sum(c.accepted for c in level.channels)
        res = "x".join(str(d) for d in level.resolution)
        print(f"{res:<12}{level.initial_cost:>16.6g}{level.final_cost:>16.6g}"
              f"{iters:>8}{accepted:>10}")
    print(f"wrote {out / 'lut.vlut'}")
    return 0


def cmd_restore(args, parser) -> int:
    _apply_config(args, parser)
    manifest = FrameManifest.load(args.manifest)
    table = lutmod.load(args.lut)
    opts = RestoreOptions(shading=not args.no_shading, clamp_output=args.clamp)
    roles = tuple(args.role) if args.role else None
    summary = restore_batch(manifest, table, args.out, opts, roles=roles)
    with open(Path(args.out) / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    for fid in summary["skipped"]:
        print(f"warning: frame {fid} has no depth map, skipped", file=sys.stderr)
    print(f"restored {summary['restored']} frames to {args.out}")
    return 0


def cmd_eval(args, parser) -> int:
    _apply_config(args, parser)
    manifest = FrameManifest.load(args.manifest)
    rows = evaluate.patch_errors(manifest, args.restored, roles=tuple(args.role or ["test"]))
    table = evaluate.error_table(rows)
    curve = evaluate.distance_std_curve(manifest, args.restored,
                                        roles=tuple(args.role or ["test"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "patch_errors.json", "w") as fh:
        json.dump(table, fh, indent=1)
    with open(out / "patch_errors.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "patch", "err_r_pct", "err_g_pct", "err_b_pct"])
        for row in rows:
            writer.writerow([row.frame_id, row.patch_index] + [f"{e:.4f}" for e in row.error_pct])
    with open(out / "distance_std.json", "w") as fh:
        json.dump(curve, fh, indent=1)
    if table["fraction_below_10pct"] is not None:
        print(f"{table['n_patch_channels']} patch-channel errors: "
              f"{100 * table['fraction_below_10pct']:.1f}% below 10%, "
              f"{100 * table['fraction_below_25pct']:.1f}% below 25%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlut",
                                     description="Frustum lookup-table calibration and restoration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a named dataset recipe")
    p.add_argument("--recipe", required=True, choices=simulate.RECIPES)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise", type=float, default=None, help="override recipe noise sigma")
    p.add_argument("--quantize", dest="quantize", action="store_true", default=None)
    p.add_argument("--no-quantize", dest="quantize", action="store_false")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="estimate the lookup table from a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["known_color", "correspondence_only"],
                   default="known_color")
    p.add_argument("--pyramid", default="4x3x10,40x30x10",
                   help="comma-separated coarse-to-fine levels, e.g. 4x3x10,40x30x10")
    p.add_argument("--z-near", type=float, default=None)
    p.add_argument("--z-far", type=float, default=None)
    p.add_argument("--in-air", action="store_true",
                   help="no additive term; defaults on for in-air recipes")
    p.add_argument("--no-pure-water", action="store_true")
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--superpixels", type=int, default=300)
    p.add_argument("--max-iterations", type=int, default=50)
    p.add_argument("--anchor-voxel", default=None, help="i,j,k voxel for scale recovery")
    p.add_argument("--anchor-alpha", default=None, help="r,g,b absolute alpha at the anchor")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("restore", help="batch-restore frames with a calibrated table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clamp", action="store_true", help="write clipped 16-bit PNG output")
    p.add_argument("--no-shading", action="store_true")
    p.add_argument("--role", action="append", default=None,
                   help="restrict to frames with this role (repeatable)")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="compare restored frames against annotations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--restored", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--role", action="append", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (FrameLoadError, LutFormatError, UnconstrainedSystemError, InvalidAnchorError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
