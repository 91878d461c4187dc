"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or format
error, 3 numerical failure. Every file is written atomically.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .config import ConfigError, RunConfig, format_config, load_config
from .ensemble import optimize_ensemble
from .grid import DegenerateError, Field2D, FieldStack
from .metrics import evaluate_depth, evaluate_edges, evaluate_image, evaluate_normals
from .normalize import normalize_depth
from .schedule import make_schedule, make_spacing, rescale_zero_snr
from .tiling import UNIT_RANGE, hires_pipeline
from .toy import (
    ConditioningPassthrough,
    DistillConfig,
    PointMassDenoiser,
    PointwiseDenoiser,
    TrainingDiverged,
    distill_lcm,
    gen_scene,
    train_denoiser,
)

log = logging.getLogger("depthdiff")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_schedule(cfg: RunConfig):
    sched = make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end, cfg.schedule_kind)
    return rescale_zero_snr(sched) if cfg.zero_snr else sched


def _write_text(path, text: str) -> None:
    io.atomic_write(path, text.encode())


def _read_depth(path) -> Field2D:
    field = io.read_field(path)
    if not isinstance(field, Field2D):
        raise UsageError(f"{path}: expected a single-channel map")
    return field


def cmd_ensemble(args, cfg: RunConfig) -> int:
    members = [_read_depth(p) for p in args.inputs]
    if len(members) > cfg.ensemble:
        log.warning("using the first %d of %d inputs", cfg.ensemble, len(members))
        members = members[: cfg.ensemble]
    if any(m.shape != members[0].shape for m in members):
        raise UsageError("ensemble members differ in size")
    sol = optimize_ensemble(members, cfg.ensemble_lambda, cfg.ensemble_max_iters, cfg.ensemble_tol, cfg.seed)
    io.write_field(args.out, sol.merged)
    lines = [
        f"members = {len(members)}",
        f"objective_value = {sol.objective_value!r}",
        f"iterations = {sol.iterations_used}",
    ]
    for i, (s, t) in enumerate(zip(sol.scales, sol.shifts)):
        lines.append(f"member{i}.scale = {float(s)!r}")
        lines.append(f"member{i}.shift = {float(t)!r}")
    _write_text(f"{args.out}.report.txt", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    pred, gt = io.read_field(args.pred), io.read_field(args.gt)
    if pred.values.shape != gt.values.shape:
        raise UsageError(f"prediction {pred.values.shape} and ground truth {gt.values.shape} differ in shape")
    modality = cfg.modality
    if modality in ("depth", "edges"):
        if not isinstance(pred, Field2D):
            raise UsageError(f"{modality} evaluation needs single-channel maps")
        if modality == "depth":
            report = evaluate_depth(pred, gt)
        else:
            report = evaluate_edges(pred, gt, cfg.edge_threshold, cfg.dbe_trunc_px, cfg.edge_match_px)
    elif modality == "normals":
        if not isinstance(pred, FieldStack):
            raise UsageError("normals evaluation needs 3-channel maps")
        report = evaluate_normals(pred, gt)
    elif modality in ("image", "shading"):
        as_stack = (lambda f: f if isinstance(f, FieldStack) else FieldStack(f.values[None]))
        report = evaluate_image(as_stack(pred), as_stack(gt), cfg.peak, shading=modality == "shading")
    else:
        raise UsageError(f"unknown modality {modality!r}")
    text = report.to_text()
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _load_denoiser(name: str, role: str):
    path = Path(name)
    if not path.is_file():
        raise UsageError(f"{role} {name!r} is neither a built-in nor a denoiser file")
    return io.load_denoiser(path)


def cmd_tile_infer(args, cfg: RunConfig) -> int:
    sched = build_schedule(cfg)
    spacing = make_spacing(sched.T, cfg.steps, cfg.spacing)
    norm = UNIT_RANGE
    if args.image:
        image = io.read_field(args.image)
        image = image.values if isinstance(image, FieldStack) else image.values[None]
        scene_depth = None
    else:
        scene = gen_scene(cfg.seed, cfg.scene_height, cfg.scene_width)
        image = scene.rgb.values
        scene_depth = scene.depth
    native = (cfg.native_size, cfg.native_size) if cfg.native_size else image.shape[1:]

    if cfg.denoiser == "point-mass":
        if scene_depth is None:
            raise UsageError("the point-mass oracle needs a generated scene, not an image file")
        d_tilde, norm = normalize_depth(scene_depth)
        if d_tilde.shape != tuple(native):
            raise UsageError("the point-mass oracle runs at the scene resolution")
        base = PointMassDenoiser(d_tilde, sched, "v", cond_channels=image.shape[0])
    elif cfg.denoiser == "pointwise":
        base = PointwiseDenoiser(sched, "v", cond_channels=image.shape[0])
    else:
        base = _load_denoiser(cfg.denoiser, "denoiser")

    refiner = None
    if cfg.target_scale > 1:
        if cfg.refiner == "passthrough":
            refiner = ConditioningPassthrough(
                sched, base.latent_channels, base.latent_channels + image.shape[0], "v"
            )
        else:
            refiner = _load_denoiser(cfg.refiner, "refiner")
    tile = (cfg.tile_size, cfg.tile_size) if cfg.tile_size else None
    depth = hires_pipeline(
        image, base, refiner, cfg.target_scale, spacing, sched, cfg.seed,
        tile_size=tile, overlap_fraction=cfg.overlap, native_size=tuple(native), norm=norm,
    )
    io.write_field(args.out, depth)
    return EXIT_OK


def cmd_distill_demo(args, cfg: RunConfig) -> int:
    sched = build_schedule(cfg)
    scene = gen_scene(cfg.seed, cfg.scene_height, cfg.scene_width)
    out = Path(args.out)
    if cfg.teacher:
        teacher = io.load_denoiser(cfg.teacher)
    else:
        log.info("training teacher for %d iterations", cfg.teacher_iterations)
        try:
            teacher = train_denoiser([scene], "v", cfg.teacher_iterations, cfg.batch_size,
                                     cfg.teacher_learning_rate, cfg.seed, sched)
        except TrainingDiverged as exc:
            _write_text(f"{out}.teacher-trace.txt", "".join(f"{v!r}\n" for v in exc.trace))
            raise
        io.save_denoiser(f"{out}.teacher", teacher)
    dcfg = DistillConfig(
        skip_k=cfg.skip_k, huber_c=cfg.huber_c, ema_mu=cfg.ema_mu,
        iterations=cfg.distill_iterations, batch_size=cfg.batch_size,
        learning_rate=cfg.distill_learning_rate, seed=cfg.seed,
        sigma_data=cfg.sigma_data, epsilon_boundary=cfg.epsilon_boundary,
    )
    try:
        student = distill_lcm(teacher, dcfg, [scene], sched)
    except TrainingDiverged as exc:
        _write_text(f"{out}.trace.txt", "".join(f"{v!r}\n" for v in exc.trace))
        raise
    io.save_denoiser(out, student)
    _write_text(f"{out}.trace.txt", "".join(f"{v!r}\n" for v in student.loss_trace))
    return EXIT_OK


def cmd_gen_scene(args, cfg: RunConfig) -> int:
    scene = gen_scene(cfg.seed, cfg.scene_height, cfg.scene_width)
    prefix = args.out
    io.write_field(f"{prefix}_rgb.pfm", scene.rgb)
    io.write_field(f"{prefix}_depth.pfm", scene.depth)
    io.write_field(f"{prefix}_normals.pfm", scene.normals)
    io.atomic_write(f"{prefix}_depth.pgm", io.encode_pgm16(scene.depth.values))
    return EXIT_OK


def cmd_convert(args, cfg: RunConfig) -> int:
    img = io.read_pfm(args.input)
    dst = Path(args.out)
    if dst.suffix.lower() == ".pgm":
        if img.color:
            raise UsageError("PGM previews are single-channel")
        io.atomic_write(dst, io.encode_pgm16(img.data))
    elif dst.suffix.lower() == ".pfm":
        io.write_pfm(dst, io.PfmImage(img.data, img.scale, little_endian=not args.big_endian))
    else:
        raise UsageError(f"unsupported output format {dst.suffix!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--spacing", choices=["leading", "trailing"])
    common.add_argument("--ensemble", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="depthdiff", description="Diffusion-based dense prediction toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ensemble", parents=[common], help="merge affine-invariant depth maps")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", parents=[common], help="score a prediction against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--modality", choices=["depth", "normals", "image", "shading", "edges"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tile-infer", parents=[common], help="global plus tiled high-resolution inference")
    p.add_argument("--image", help="RGB PFM input; default: a generated scene")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tile_infer)

    p = sub.add_parser("distill-demo", parents=[common], help="train a toy teacher and distill a one-step student")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill_demo)

    p = sub.add_parser("gen-scene", parents=[common], help="write a synthetic scene")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("convert", parents=[common], help="PFM to 16-bit PGM preview or PFM re-encode")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--big-endian", action="store_true")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.replace(seed=args.seed, steps=args.steps, spacing=args.spacing, ensemble=args.ensemble,
                          modality=getattr(args, "modality", None))
        log.debug("effective config:\n%s", format_config(cfg))
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, io.FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DegenerateError, TrainingDiverged, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
