"""Command-line interface: ``facemold <subcommand> [flags]``.

Exit codes: 0 on success, 1 on usage or input errors, 2 on numerical failure.
Every subcommand accepts ``--config file.json``; keys are flag names with
dashes replaced by underscores, and explicit flags override the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import DimensionError, NumericalError
from .fit import FitConfig, refine_depth, reconstruct
from .fit import fit_coarse as run_fit_coarse
from .gradcheck import (
    check_camera_transform,
    check_rasterize,
    check_render_layer,
    check_shading_loss,
)
from .metrics import depth_error_stats, error_heatmap
from .model import load_model, read_header, save_model
from .pose import Representation, camera_transform, load_representation, save_representation
from .raster import DepthMap, render_depth, render_normal_map, render_pncc
from .sfs import LossWeights, normals_from_depth, shade
from .synth import PoseRanges, generate_toy_model, make_dataset, sample_lighting, sample_representation

logger = logging.getLogger("facemold")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------- helpers


def _load_rep(source: str, model) -> Representation:
    if source == "zero":
        return Representation.zeros(model)
    return load_representation(source, model)


def _read_depth(path, mask_path=None) -> DepthMap:
    """Read a PFM; validity comes from ``mask_path``, a sibling ``.mask.png``, or finiteness."""
    depth = io.read_pfm(path)
    if mask_path is None and Path(path).with_suffix(".mask.png").exists():
        mask_path = Path(path).with_suffix(".mask.png")
    if mask_path is not None:
        valid = io.read_mask_png(mask_path)
    else:
        valid = np.isfinite(depth)
    return DepthMap(np.where(valid, depth, 0.0), valid)


def _write_depth(path, depth: DepthMap) -> None:
    path = Path(path)
    io.write_pfm(path, depth.filled())
    io.write_mask_png(path.with_suffix(".mask.png"), depth.valid)


def _fit_config(args) -> FitConfig:
    return FitConfig(
        max_iterations=args.max_iterations,
        step_size=args.step_size,
        convergence_threshold=args.convergence_threshold,
        coarse_fidelity_weight=args.coarse_fidelity_weight,
        rng_seed=args.seed,
        feedback_iterations=args.feedback_iterations,
        refine_iterations=args.refine_iterations,
        fit_geometry=not args.pose_only,
        direction=args.direction,
        damping=args.damping,
        threads=args.threads,
    )


def _weights(args) -> LossWeights:
    return LossWeights(args.lambda_sh, args.lambda_f, args.lambda_sm)


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_model(args) -> int:
    model = generate_toy_model(args.seed, n=args.grid, d_id=args.d_id, d_exp=args.d_exp, d_tex=args.d_tex)
    save_model(model, args.out)
    print(f"wrote {args.out}: {model.vertex_count} vertices, {model.triangle_count} triangles")
    return 0


def cmd_model_info(args) -> int:
    header = read_header(args.model)
    if args.json:
        print(json.dumps(header))
    else:
        for key, value in header.items():
            print(f"{key}: {value}")
    return 0


def cmd_synth(args) -> int:
    model = load_model(args.model)
    ranges = PoseRanges(args.angle_range, args.translation_range, (args.scale_min, args.scale_max))
    manifest = make_dataset(
        model,
        args.count,
        args.seed,
        args.out,
        width=args.size,
        height=args.size,
        background=args.background,
        pose_ranges=ranges,
        coeff_sigma=args.coeff_sigma,
        threads=args.threads,
    )
    print(f"wrote {len(manifest['scenes'])} scenes to {args.out}")
    return 0


def cmd_render(args) -> int:
    model = load_model(args.model)
    rep = _load_rep(args.rep, model)
    depth, cache, mesh = render_depth(model, rep, args.size, args.size, threads=args.threads)
    _write_depth(args.out, depth)
    if args.pncc:
        pncc = render_pncc(model, mesh, cache)
        io.write_channel_png(args.pncc, pncc.data, pncc.valid)
    if args.normals:
        normals = render_normal_map(mesh, cache)
        io.write_channel_png(args.normals, normals.data, normals.valid, signed=True)
    print(f"wrote {args.out}: {int(depth.valid.sum())} covered pixels")
    return 0


def cmd_fit_coarse(args) -> int:
    model = load_model(args.model)
    target = _read_depth(args.target, args.target_mask)
    r_init = _load_rep(args.init, model)
    rep, trace = run_fit_coarse(target, model, r_init, _fit_config(args))
    save_representation(rep, args.out)
    if args.trace:
        _write_json(args.trace, {
            "initial_loss": trace.initial_loss,
            "loss": trace.loss,
            "step_norm": trace.step_norm,
            "step_length": trace.step_length,
        })
    final = trace.loss[-1] if trace.loss else trace.initial_loss
    print(f"fit-coarse: {len(trace)} iterations, loss {trace.initial_loss:.6g} -> {final:.6g}")
    return 0


def cmd_refine(args) -> int:
    model = load_model(args.model)
    rep = _load_rep(args.rep, model)
    image = io.read_pgm(args.image)
    depth, cache, _ = render_depth(model, rep, image.shape[1], image.shape[0], threads=args.threads)
    result = refine_depth(depth, image, model, cache, _weights(args), _fit_config(args), details=True)
    _write_depth(args.out, result.depth)
    if args.recovered:
        _write_json(args.recovered, {
            "lighting": [float(v) for v in result.lighting.l],
            "texture": [float(v) for v in result.texcoeffs.coeffs],
        })
    print(f"refine: {result.iterations} iterations, loss {result.initial_loss:.6g} -> {result.final_loss:.6g}")
    return 0


def _reconstruct_target(source: str, model, size: int, threads: int) -> DepthMap:
    kind, _, path = source.partition(":")
    if kind == "depth" and path:
        return _read_depth(path)
    if kind == "synth" and path:
        depth, _, _ = render_depth(model, load_representation(path, model), size, size, threads=threads)
        return depth
    raise UsageError(f"--target must be depth:<file> or synth:<rep-file>, got {source!r}")


def cmd_reconstruct(args) -> int:
    model = load_model(args.model)
    image = io.read_pgm(args.image)
    if image.shape[0] != image.shape[1]:
        raise UsageError(f"reconstruct needs a square image, got {image.shape}")
    target = _reconstruct_target(args.target, model, image.shape[0], args.threads)
    result = reconstruct(image, model, _fit_config(args), target_depth=target, weights=_weights(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_representation(result.representation, out / "rep.json")
    _write_depth(out / "coarse.pfm", result.coarse)
    _write_depth(out / "fine.pfm", result.fine)
    for i, (pncc, normals) in enumerate(zip(result.pncc, result.normal_maps)):
        io.write_channel_png(out / f"pncc_{i:02d}.png", pncc.data, pncc.valid)
        io.write_channel_png(out / f"normals_{i:02d}.png", normals.data, normals.valid, signed=True)
    print(f"reconstruct: wrote {out} ({len(result.pncc)} feedback renders)")
    return 0


def cmd_eval(args) -> int:
    pred = _read_depth(args.pred, args.pred_mask)
    gt = _read_depth(args.gt, args.gt_mask)
    mask = io.read_mask_png(args.mask) if args.mask else None
    stats = depth_error_stats(pred, gt, mask)
    payload = stats.to_dict()
    if args.json:
        _write_json(args.json, payload)
    if args.heatmap:
        heat = error_heatmap(pred, gt, mask)
        io.write_pfm(args.heatmap, heat)
        io.write_scalar_png(Path(args.heatmap).with_suffix(".png"), heat)
    print(json.dumps(payload))
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    model = generate_toy_model(args.seed)
    ranges = PoseRanges(angle=0.2, translation=3.0)
    rep = sample_representation(rng, model, ranges)
    target_rep = sample_representation(rng, model, ranges)
    size = args.size
    target, _, _ = render_depth(model, target_rep, size, size)
    z0, cache, mesh = render_depth(model, rep, size, size)
    z_hat = z0.with_depth(z0.depth + rng.normal(scale=0.3, size=z0.shape))
    lighting = sample_lighting(rng)
    albedo = np.full(z0.shape, 0.6)
    image = shade(albedo, lighting, normals_from_depth(z0)) + rng.normal(scale=0.02, size=z0.shape)

    checks = [
        check_camera_transform(model, rep, rng),
        check_rasterize(camera_transform(model, rep), size, size, rng),
        check_render_layer(model, rep, target),
    ]
    for name, w in (
        ("loss[e_sh]", LossWeights(1.0, 0.0, 0.0)),
        ("loss[e_f]", LossWeights(0.0, 1.0, 0.0)),
        ("loss[e_sm]", LossWeights(0.0, 0.0, 1.0)),
        ("loss[total]", LossWeights()),
    ):
        checks.append(check_shading_loss(z_hat, z0, image, albedo, lighting, w, rng, name=name))
    for check in checks:
        print(check.line())
    return 0 if all(c.passed for c in checks) else 2


# ---------------------------------------------------------------- parser


def _add_common(p):
    p.add_argument("--config", help="JSON file of flag defaults (flags override it)")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--threads", type=int, default=1, help="worker threads for rasterization and synthesis")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_fit_flags(p):
    d = FitConfig()
    p.add_argument("--max-iterations", type=int, default=d.max_iterations)
    p.add_argument("--step-size", type=float, default=d.step_size)
    p.add_argument("--convergence-threshold", type=float, default=d.convergence_threshold)
    p.add_argument("--coarse-fidelity-weight", type=float, default=d.coarse_fidelity_weight)
    p.add_argument("--feedback-iterations", type=int, default=d.feedback_iterations)
    p.add_argument("--refine-iterations", type=int, default=d.refine_iterations)
    p.add_argument("--direction", choices=("gauss-newton", "gradient"), default=d.direction)
    p.add_argument("--damping", type=float, default=d.damping)
    p.add_argument("--pose-only", action="store_true", help="freeze geometry coefficients")


def _add_weight_flags(p):
    d = LossWeights()
    p.add_argument("--lambda-sh", type=float, default=d.lambda_sh)
    p.add_argument("--lambda-f", type=float, default=d.lambda_f)
    p.add_argument("--lambda-sm", type=float, default=d.lambda_sm)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="facemold", description="Coarse-to-fine face geometry by inverse rendering.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-model", help="build a procedural toy morphable model")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=30, help="vertex grid side")
    p.add_argument("--d-id", type=int, default=8)
    p.add_argument("--d-exp", type=int, default=4)
    p.add_argument("--d-tex", type=int, default=10)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("model-info", help="print a model file header")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_model_info)

    p = sub.add_parser("synth", help="write a synthetic scene dataset")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--background", type=float, default=0.25)
    p.add_argument("--coeff-sigma", type=float, default=10.0)
    p.add_argument("--angle-range", type=float, default=0.35)
    p.add_argument("--translation-range", type=float, default=10.0)
    p.add_argument("--scale-min", type=float, default=0.8)
    p.add_argument("--scale-max", type=float, default=1.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="render a representation to a PFM depth map")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--rep", default="zero", help="representation JSON or 'zero'")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--pncc", help="also write the PNCC as 16-bit PNG")
    p.add_argument("--normals", help="also write the normal map as 16-bit PNG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit-coarse", help="fit a representation to a target depth map")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True, help="target depth PFM")
    p.add_argument("--target-mask", help="target validity PNG (default: finite pixels)")
    p.add_argument("--init", default="zero", help="initial representation JSON or 'zero'")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="write the iteration trace as JSON")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit_coarse)

    p = sub.add_parser("refine", help="refine the rendered depth of a representation against an image")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--rep", required=True, help="coarse representation JSON")
    p.add_argument("--image", required=True, help="grayscale PGM")
    p.add_argument("--out", required=True)
    p.add_argument("--recovered", help="write the recovered lighting and texture coefficients as JSON")
    _add_fit_flags(p)
    _add_weight_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("reconstruct", help="coarse fit, render and refine")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="square grayscale PGM")
    p.add_argument("--target", required=True, help="depth:<file.pfm> or synth:<rep.json>")
    p.add_argument("--out", required=True, help="output directory")
    _add_fit_flags(p)
    _add_weight_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="depth error statistics")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred-mask", help="validity PNG for --pred (default: finite pixels)")
    p.add_argument("--gt-mask", help="validity PNG for --gt (default: finite pixels)")
    p.add_argument("--mask", help="evaluation mask PNG")
    p.add_argument("--json", help="write the statistics as JSON")
    p.add_argument("--heatmap", help="write the absolute error map as PFM (+ PNG)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    _add_common(p)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise UsageError("config file must hold a JSON object")
        known = set(vars(args))
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, sys.argv[1:] if argv is None else list(argv))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"facemold: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (DimensionError, ValueError, OSError) as exc:
        print(f"facemold: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
