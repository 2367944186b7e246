"""Command-line front end.

    sdslab <command> [--config PATH] [--seed N] [--out DIR]

Commands: teacher-train, distill, ablate, theory-check, variance-check,
teacher-compare, render. Every command writes ``config_echo.cfg`` (the fully
resolved configuration) next to its outputs. Without ``--out`` the output
goes to ``$SDSLAB_OUT/<command>`` (default root: ``sdslab_out``).

Exit status: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, CorruptCheckpointError, TrainingDivergence

COMMANDS = ("teacher-train", "distill", "ablate", "theory-check", "variance-check", "teacher-compare", "render")
OUT_ENV = "SDSLAB_OUT"
DEFAULT_ROOT = "sdslab_out"

logger = logging.getLogger("sdslab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdslab", description="Time-step curriculum score distillation at desk scale.")
    p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command")
    helps = {
        "teacher-train": "train the view- and class-conditioned teachers",
        "distill": "run the two-stage distillation for one shape",
        "ablate": "failure-rate ablation over schedule / mask / teacher",
        "theory-check": "time-step lower-bound curves on a 2-mode mixture",
        "variance-check": "pairwise SSIM of denoised samples at two resolutions",
        "teacher-compare": "MaskIoU of view vs class teacher across time steps",
        "render": "write the ground-truth field and its sinogram as PGM",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name], description=helps[name])
        sp.add_argument("--config", type=Path, help="config file (key = value, [section] headers)")
        sp.add_argument("--seed", type=_u64, help="overrides run.seed")
        sp.add_argument("--out", type=Path, help="output directory")
    return p


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config is not None else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(run={"seed": args.seed})
    return cfg


def output_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV) or DEFAULT_ROOT) / args.command


def _load_teacher_pair(cfg: RunConfig):
    from .fileio import load_checkpoint

    return load_checkpoint(cfg.run.view_teacher), load_checkpoint(cfg.run.class_teacher)


def cmd_teacher_train(cfg: RunConfig, out: Path) -> int:
    from .diffusion import make_schedule
    from .fileio import save_checkpoint
    from .pipeline import heldout_losses, train_teachers

    view, fine = train_teachers(cfg)
    save_checkpoint(view, out / "view.dtck")
    save_checkpoint(fine, out / "class.dtck")
    sched = make_schedule(cfg.diffusion.T, cfg.diffusion.schedule)
    (out / "teacher_losses.csv").write_text(heldout_losses(cfg, view, fine, sched))
    return 0


def cmd_distill(cfg: RunConfig, out: Path) -> int:
    from .pipeline import distill

    record, _ = distill(cfg, out_dir=out)
    print(f"status={record.status} final_psnr={record.metrics['final_psnr']:.3f}")
    return 0 if record.status == "completed" else 2


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    from .experiments import ablate, grid_from_config
    from .sds import Teachers

    grid = grid_from_config(cfg)
    teachers = None
    workers = cfg.experiment.ablation_workers
    if cfg.run.teacher_source == "trained":
        view, fine = _load_teacher_pair(cfg)  # also fails fast on missing files
        if workers <= 1:
            teachers = Teachers(view, fine, cfg.run.shape_class)
    ablate(grid, cfg, teachers, workers=workers, out_dir=out)
    sys.stdout.write(grid.csv_text())
    return 0


def cmd_theory_check(cfg: RunConfig, out: Path) -> int:
    from .experiments import run_theory_check

    res = run_theory_check(cfg, out)
    for d in sorted(res.trained.minimal_t):
        v = res.trained.minimal_t[d]
        print(f"|delta|={d:g} minimal_t={'unbounded' if v is None else v}")
    return 0


def cmd_variance_check(cfg: RunConfig, out: Path) -> int:
    from .experiments import run_variance_check
    from .fileio import load_checkpoint

    full, low = run_variance_check(cfg, load_checkpoint(cfg.run.view_teacher), out)
    print(f"ssim_full={full:.4f} ssim_low={low:.4f}")
    return 0


def cmd_teacher_compare(cfg: RunConfig, out: Path) -> int:
    from .experiments import compare_csv, run_teacher_compare

    view, fine = _load_teacher_pair(cfg)
    rows = run_teacher_compare(cfg, view, fine, out)
    sys.stdout.write(compare_csv(rows))
    return 0


def cmd_render(cfg: RunConfig, out: Path) -> int:
    from .fileio import write_pgm
    from .pipeline import ground_truth_spec
    from .shapes import rasterize
    from .student import Camera

    camera = Camera(teacher_res=cfg.run.teacher_res)
    spec = ground_truth_spec(cfg)
    R = cfg.run.render_res_stage2
    grid = rasterize(spec, R, camera)
    write_pgm(grid, out / "ground_truth.pgm")
    angles = np.arange(64) * (2 * math.pi / 64)
    sino = np.stack([camera.density(grid, a) for a in angles])
    write_pgm(sino / max(float(sino.max()), 1e-12), out / "sinogram.pgm")
    return 0


HANDLERS = {
    "teacher-train": cmd_teacher_train,
    "distill": cmd_distill,
    "ablate": cmd_ablate,
    "theory-check": cmd_theory_check,
    "variance-check": cmd_variance_check,
    "teacher-compare": cmd_teacher_compare,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        out = output_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config_echo.cfg").write_text(dump_config(cfg))
        return HANDLERS[args.command](cfg, out)
    except (OSError, ConfigError, CorruptCheckpointError, TrainingDivergence, ValueError) as exc:
        sys.stderr.write(f"sdslab {args.command}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
