"""Command-line entry point: ``monoref <subcommand> [flags]``.

Subcommands: synth, align, refine, train-toy, eval-pose, eval-pcd, selftest.
Every run is deterministic given ``--seed``. Verbosity comes from the
``MONOREF_LOG`` environment variable (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .geometry import DegenerateError
from .io import (
    ContainerError,
    MetricReport,
    export_ply,
    load_container,
    load_fixtures,
    poses_from_records,
    pose_records,
    save_container,
    save_fixtures,
)
from .losses import LossConfig
from .metrics import maa30, pose_accuracy
from .pipeline import TrainConfig, evaluate_scenes, prepare_views, refine_scene, train_toy
from .pointmap import Pointmap, align_mono_to_pair, rms_error
from .refinement import PARAM_GROUPS, RefineConfig, RefineWeights
from .selftest import run_selftest
from .synth import NoiseSpec, make_scene
from .tensor import NonFiniteError, ShapeError

__all__ = ["main", "build_parser", "EXIT_CODES"]

log = logging.getLogger("monoref")

EXIT_CODES = {
    "ok": 0,
    "usage": 2,
    "missing-file": 3,
    "bad-container": 4,
    "bad-value": 5,
    "degenerate": 6,
    "selftest-failed": 7,
}

_U64 = 2**64


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"monoref: usage error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CODES["usage"])


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < _U64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {v}")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 32x32, got {text!r}") from None
    if h < 8 or w < 8:
        raise argparse.ArgumentTypeError(f"size must be at least 8x8, got {text}")
    return h, w


def _groups(text: str) -> tuple[str, ...]:
    groups = tuple(g.strip() for g in text.split(",") if g.strip())
    bad = [g for g in groups if g not in PARAM_GROUPS]
    if not groups or bad:
        raise argparse.ArgumentTypeError(f"groups must be a nonempty subset of {','.join(PARAM_GROUPS)}, got {text!r}")
    return groups


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_u64, default=0, help="base seed (scene k uses seed + k)")
    common.add_argument("--scenes", type=_positive, default=1, help="number of synthetic scenes")
    common.add_argument("--size", type=_size, default=(32, 32), metavar="HxW", help="image size")
    common.add_argument("--iters", type=_positive, default=2, help="refinement steps N")
    common.add_argument("--gamma", type=float, default=0.9, help="iteration weight decay")
    common.add_argument("--alpha", type=float, default=0.2, help="confidence regularizer weight")
    common.add_argument("--out", type=Path, default=Path("monoref_out"), help="output directory")
    common.add_argument("--weights", type=Path, help="refinement weights container")
    common.add_argument("--fixtures", type=Path, help="fixture container (instead of generating scenes)")
    common.add_argument("--threads", type=_positive, default=1, help="worker threads for evaluation")

    parser = _Parser(prog="monoref", description="Monocular-prior pointmap refinement toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write synthetic fixtures to a container")
    p = sub.add_parser("align", parents=[common], help="align monocular maps to pairwise maps")
    p.add_argument("--pure-sim3", action="store_true", help="noise-free pairwise maps, mono off by a Sim3 only")
    sub.add_parser("refine", parents=[common], help="run the refinement loop and write pointmaps + PLY")
    p = sub.add_parser("train-toy", parents=[common], help="train refinement weights on synthetic scenes")
    p.add_argument("--epochs", type=_positive, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--batch", type=_positive, default=TrainConfig.batch)
    p.add_argument("--optimizer", choices=("adam", "gd"), default=TrainConfig.optimizer)
    p.add_argument("--schedule", choices=("constant", "onecycle"), default=TrainConfig.schedule,
                   help="step-size schedule over the run")
    p.add_argument("--trainable", type=_groups, default=TrainConfig.trainable, metavar="GROUPS",
                   help=f"comma-separated parameter groups to optimize (default {','.join(PARAM_GROUPS)})")
    p.add_argument("--clip", type=float, default=TrainConfig.clip,
                   help="global gradient-norm limit per update; 0 disables")
    p = sub.add_parser("eval-pose", parents=[common], help="relative pose metrics report")
    p.add_argument("--pred", type=Path, help="predicted pose container (compare against --gt)")
    p.add_argument("--gt", type=Path, help="ground-truth pose container")
    sub.add_parser("eval-pcd", parents=[common], help="point-cloud accuracy/completeness report")
    sub.add_parser("selftest", help="run the built-in oracle checks")
    return parser


# ---------------------------------------------------------------------------


def _scene_seeds(args) -> list[int]:
    return [(args.seed + k) % _U64 for k in range(args.scenes)]


def _fixtures(args, noise: NoiseSpec | None = None):
    if args.fixtures is not None:
        return load_fixtures(args.fixtures)
    h, w = args.size
    return [make_scene(s, h, w, noise) for s in _scene_seeds(args)]


def _weights(args) -> RefineWeights:
    if args.weights is None:
        raise CliError("usage", f"{args.command}: --weights is required")
    try:
        return RefineWeights.from_dict(load_container(args.weights))
    except KeyError as exc:
        raise CliError("bad-container", f"weights container {args.weights}: {exc.args[0]}") from None


def _config(args, **extra) -> dict:
    cfg = {"command": args.command, "seed": args.seed, "scenes": args.scenes, "size": list(args.size),
           "iters": args.iters, "gamma": args.gamma, "alpha": args.alpha}
    for key in ("weights", "fixtures"):
        if getattr(args, key, None) is not None:
            cfg[key] = str(getattr(args, key))
    cfg.update(extra)
    return cfg


def cmd_synth(args) -> int:
    fixtures = _fixtures(args)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "fixtures.pmz"
    save_fixtures(path, fixtures)
    print(f"wrote {len(fixtures)} scene(s) to {path}")
    return 0


def cmd_align(args) -> int:
    noise = NoiseSpec.pure_sim3() if args.pure_sim3 else None
    worst = 0.0
    for fx in _fixtures(args, noise):
        for v in range(2):
            aligned, T = align_mono_to_pair(fx.mono[v], fx.pair[v], fx.conf[v])
            pre = rms_error(fx.mono[v], fx.pair[v])
            post = rms_error(aligned, fx.pair[v])
            worst = max(worst, post)
            print(f"scene {fx.seed} view {v + 1}: pre-RMS {pre:.6e}  post-RMS {post:.6e}  scale {T.s:.6f}")
    print(f"max post-alignment RMS {worst:.6e}")
    return 0


def cmd_refine(args) -> int:
    weights = _weights(args)
    args.out.mkdir(parents=True, exist_ok=True)
    records = {}
    for k, fx in enumerate(_fixtures(args)):
        views = prepare_views(fx)
        for v, (vi, steps) in enumerate(zip(views, refine_scene(views, weights, args.iters))):
            tag = f"scene{k:04d}/view{v}"
            records[f"{tag}/valid"] = vi.valid
            records[f"{tag}/P0"] = fx.pair[v].points
            for n, P in enumerate(steps, start=1):
                records[f"{tag}/P{n}"] = Pointmap.from_tensor(P, vi.valid).points
            final = Pointmap.from_tensor(steps[-1], vi.valid)
            export_ply(final, fx.images[v], args.out / f"scene{k:04d}_view{v}.ply")
    save_container(args.out / "refined.pmz", records)
    print(f"wrote refined pointmaps to {args.out / 'refined.pmz'} and PLY files to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        batch=args.batch,
        seed=args.seed,
        optimizer=args.optimizer,
        schedule=args.schedule,
        trainable=args.trainable,
        clip=args.clip or None,
        refine=RefineConfig(iters=args.iters),
        loss=LossConfig(gamma=args.gamma, alpha=args.alpha),
    )
    init = _weights(args) if args.weights is not None else None
    result = train_toy(_fixtures(args), cfg, init)
    args.out.mkdir(parents=True, exist_ok=True)
    save_container(args.out / "weights.pmz", result.weights.as_dict())
    (args.out / "loss_curve.json").write_text(json.dumps({"loss": result.loss_curve}, indent=2))
    (args.out / "loss_curve.txt").write_text(
        "".join(f"{e}\t{v:.9g}\n" for e, v in enumerate(result.loss_curve))
    )
    print(f"final loss {result.loss_curve[-1]:.6g}; weights in {args.out / 'weights.pmz'}")
    return 0


def _pose_report_from_files(args) -> int:
    if args.pred is None or args.gt is None:
        raise CliError("usage", "eval-pose: --pred and --gt must be given together")
    pred = poses_from_records(load_container(args.pred))
    gt = poses_from_records(load_container(args.gt))
    if len(pred) != len(gt):
        raise CliError("bad-value", f"eval-pose: {len(pred)} predicted scenes but {len(gt)} ground-truth scenes")
    report = MetricReport(args.seed, _config(args, pred=str(args.pred), gt=str(args.gt)))
    for k, (p, g) in enumerate(zip(pred, gt)):
        report.add_scene(f"scene{k:04d}", {"mAA30": maa30(p, g), **pose_accuracy(p, g)})
    return _emit(args, report, "pose")


def _emit(args, report: MetricReport, stem: str) -> int:
    j, t = report.write(args.out, stem)
    sys.stdout.write(report.to_table())
    log.info("wrote %s and %s", j, t)
    return 0


def _eval(args, kind: str) -> int:
    fixtures = _fixtures(args)
    weights = _weights(args)
    evals = evaluate_scenes(fixtures, weights, args.iters, threads=args.threads)
    args.out.mkdir(parents=True, exist_ok=True)
    for which in ("initial", "refined"):
        report = MetricReport(args.seed, _config(args, pointmaps=which))
        for e in evals:
            if kind == "pose":
                row = {"mAA30": getattr(e, f"maa_{which}"), **getattr(e, f"pose_{which}")}
            else:
                row = getattr(e, f"cloud_{which}")
            report.add_scene(f"scene{e.seed}", row)
        if kind == "pose":
            poses = [e.refined[1 if which == "initial" else 2] for e in evals]
            save_container(args.out / f"poses_{which}.pmz", pose_records(poses))
        print(f"[{which}]")
        _emit(args, report, f"{kind}_{which}")
    if kind == "pose":
        save_container(args.out / "poses_gt.pmz", pose_records([list(fx.poses) for fx in fixtures]))
    return 0


def cmd_eval_pose(args) -> int:
    if args.pred is not None or args.gt is not None:
        return _pose_report_from_files(args)
    return _eval(args, "pose")


def cmd_eval_pcd(args) -> int:
    return _eval(args, "pcd")


def cmd_selftest(args) -> int:
    results = run_selftest()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} {r.detail} ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"monoref: selftest failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CODES["selftest-failed"]
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "align": cmd_align,
    "refine": cmd_refine,
    "train-toy": cmd_train,
    "eval-pose": cmd_eval_pose,
    "eval-pcd": cmd_eval_pcd,
    "selftest": cmd_selftest,
}


def _setup_logging() -> None:
    level = os.environ.get("MONOREF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        kind, msg = exc.kind, str(exc)
    except FileNotFoundError as exc:
        kind, msg = "missing-file", f"file not found: {exc.filename or exc}"
    except ContainerError as exc:
        kind, msg = "bad-container", f"malformed container: {exc}"
    except DegenerateError as exc:
        kind, msg = "degenerate", f"degenerate geometry: {exc}"
    except (ValueError, ShapeError, NonFiniteError) as exc:
        kind, msg = "bad-value", f"invalid input: {exc}"
    print(f"monoref: {msg}", file=sys.stderr)
    return EXIT_CODES[kind]


if __name__ == "__main__":
    raise SystemExit(main())
