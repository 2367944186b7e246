"""Verification experiments.

* ``theory_curve``: score-error of a teacher at corrupted inputs
  x* + delta across time steps, and the smallest adequate t per |delta|.
* ``variance_check``: pairwise SSIM of a denoised set at full and reduced
  resolution.
* ``teacher_compare``: MaskIoU of denoised projections for the view- and
  class-conditioned teachers across time steps.
* ``ablate``: failure rate and PSNR over schedule / mask / teacher toggles.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .diffusion import NoiseSchedule, NoisySample, ddim_denoise, perturb
from .metrics import mask_iou, pairwise_ssim
from .shapes import ShapeSpec, rasterize
from .student import Camera, block_mean
from .teacher import Condition, GaussianMixture, Guided, gmm_eps

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# lower-bound curves


@dataclass
class TheoryCurve:
    rows: list[tuple[float, int, float]]
    epsilon: float
    minimal_t: dict[float, int | None]

    def errors(self, delta: float) -> list[tuple[int, float]]:
        return [(t, e) for d, t, e in self.rows if d == delta]

    def minimal_t_nondecreasing(self) -> bool:
        seq = [self.minimal_t[d] for d in sorted(self.minimal_t)]
        big = [math.inf if v is None else v for v in seq]
        return all(a <= b for a, b in zip(big, big[1:]))

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write("delta,t,error\n")
        for d, t, e in self.rows:
            buf.write(f"{d:.6g},{t},{e:.10g}\n")
        buf.write("\ndelta,minimal_t\n")
        for d in sorted(self.minimal_t):
            v = self.minimal_t[d]
            buf.write(f"{d:.6g},{'unbounded' if v is None else v}\n")
        return buf.getvalue()


def score_errors(
    gmm: GaussianMixture,
    teacher: Callable,
    delta: float,
    t_grid: Sequence[int],
    trials: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> list[float]:
    """Mean ||eps_hat(x_t) - eps*(x_t)||^2 with x_t built from x* + delta."""
    x_star = gmm.sample(trials, rng)
    dirs = rng.standard_normal(x_star.shape)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    x_pi = x_star + delta * dirs
    out = []
    for t in t_grid:
        noise = rng.standard_normal(x_pi.shape)
        x_t = perturb(x_pi, t, noise, sched)
        exact = gmm_eps(gmm, x_t, sched)
        approx = np.asarray(teacher(x_t.data, t, None), dtype=np.float64)
        out.append(float(np.mean(np.sum((approx - exact) ** 2, axis=1))))
    return out


def theory_curve(
    gmm: GaussianMixture,
    teacher: Callable,
    delta_mags: Sequence[float],
    t_grid: Sequence[int],
    epsilon: float,
    trials: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> TheoryCurve:
    """Error grid over (|delta|, t) and the smallest t meeting ``epsilon``.

    A |delta| for which no grid t reaches the target is reported as None
    ("unbounded").
    """
    if trials < 100:
        raise ValueError("theory_curve needs at least 100 trials per cell")
    rows, minimal = [], {}
    for d in delta_mags:
        errs = score_errors(gmm, teacher, float(d), t_grid, trials, sched, rng)
        rows += [(float(d), int(t), e) for t, e in zip(t_grid, errs)]
        ok = [t for t, e in zip(t_grid, errs) if e <= epsilon]
        minimal[float(d)] = int(min(ok)) if ok else None
    return TheoryCurve(rows, epsilon, minimal)


def two_mode_mixture(dim: int = 8, separation: float = 1.0, std: float = 0.1) -> GaussianMixture:
    e = np.ones(dim) / math.sqrt(dim)
    return GaussianMixture(np.array([0.5, 0.5]), np.stack([separation * e, -separation * e]), np.array([std, std]))


@dataclass
class TheoryCheck:
    trained: TheoryCurve
    oracle: TheoryCurve
    floor: float


def theory_check(
    gmm: GaussianMixture,
    teacher: Callable,
    sched: NoiseSchedule,
    seed: int = 0,
    delta_mags: Sequence[float] = (0.0, 0.5, 1.0),
    t_grid: Sequence[int] = tuple(range(50, 1000, 50)),
    trials: int = 200,
) -> TheoryCheck:
    """Trained-teacher curve at epsilon = 2x the on-distribution error floor,
    plus the exact-oracle control run.

    The floor is the worst on-distribution (delta = 0) error over the grid,
    i.e. the uniform accuracy the trained teacher actually achieves.
    """
    ss = np.random.SeedSequence(seed)
    r_floor, r_curve, r_oracle = (np.random.default_rng(s) for s in ss.spawn(3))
    floor = max(score_errors(gmm, teacher, 0.0, t_grid, trials, sched, r_floor))
    trained = theory_curve(gmm, teacher, delta_mags, t_grid, 2.0 * floor, trials, sched, r_curve)
    oracle_teacher = lambda x, t, c: gmm_eps(gmm, NoisySample(np.asarray(x), int(t)), sched)  # noqa: E731
    oracle = theory_curve(gmm, oracle_teacher, delta_mags, t_grid, 1e-6, trials, sched, r_oracle)
    return TheoryCheck(trained, oracle, floor)


# ---------------------------------------------------------------------------
# variance vs resolution


def variance_check(
    teacher: Callable,
    cond,
    reference: np.ndarray,
    t: int,
    M: int,
    downsample: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    steps: int = 10,
    data_range: float = 2.0,
    cfg_scale: float = 1.0,
):
    """Pairwise SSIM of M denoised copies of ``reference``: (full, downsampled)."""
    if M < 2:
        raise ValueError("need at least two samples")
    guided = Guided(teacher, cfg_scale)
    outs = []
    for _ in range(M):
        x_t = perturb(reference, t, rng.standard_normal(np.shape(reference)), sched)
        outs.append(ddim_denoise(x_t, guided, cond, steps, sched).data)
    full = pairwise_ssim(outs, data_range)
    low = pairwise_ssim([block_mean(o, downsample) for o in outs], data_range)
    return full, low, outs


# ---------------------------------------------------------------------------
# teacher comparison


@dataclass
class CompareRow:
    t: int
    iou_view: float
    iou_class: float

    @property
    def gap(self) -> float:
        return self.iou_view - self.iou_class


def teacher_compare(
    view_teacher: Callable,
    class_teacher: Callable,
    specs: Sequence[ShapeSpec],
    sched: NoiseSchedule,
    rng: np.random.Generator,
    t_list: Sequence[int] = (200, 400, 600, 800),
    angles_per_shape: int = 4,
    camera: Camera = Camera(),
    steps: int = 10,
    density_threshold: float = 0.05,
    cfg_scale: float = 1.0,
) -> list[CompareRow]:
    """Mean MaskIoU of denoised projections against ground truth.

    Both teachers see identical noisy inputs; masks threshold the mean
    density at ``density_threshold``.
    """
    cases = []
    for spec in specs:
        grid = rasterize(spec, camera.teacher_res, camera)
        for ang in rng.uniform(0.0, 2 * math.pi, size=angles_per_shape):
            cases.append((camera.observe(grid, ang), float(ang), spec.class_id))
    vt, ct = Guided(view_teacher, cfg_scale), Guided(class_teacher, cfg_scale)
    thr = camera.scale * density_threshold + camera.offset
    rows = []
    for t in t_list:
        iv, ic = [], []
        for obs, ang, cls in cases:
            x_t = perturb(obs, t, rng.standard_normal(obs.shape), sched)
            xv = ddim_denoise(x_t, vt, Condition.view(ang), steps, sched).data
            xc = ddim_denoise(x_t, ct, Condition.label(cls), steps, sched).data
            iv.append(mask_iou(xv, obs, thr))
            ic.append(mask_iou(xc, obs, thr))
        rows.append(CompareRow(int(t), float(np.mean(iv)), float(np.mean(ic))))
    return rows


def compare_csv(rows: Sequence[CompareRow]) -> str:
    buf = io.StringIO()
    buf.write("t,mask_iou_view,mask_iou_class,gap\n")
    for r in rows:
        buf.write(f"{r.t},{r.iou_view:.6f},{r.iou_class:.6f},{r.gap:.6f}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# ablation harness

ABLATION_HEADER = ("schedule", "mask", "teacher", "runs", "failures", "failure_rate", "mean_psnr", "psnr_threshold")
RUN_HEADER = ("schedule", "mask", "teacher", "seed", "shape_seed", "shape_class", "status", "final_psnr", "failed")


@dataclass
class AblationGrid:
    schedules: tuple[str, ...] = ("annealed", "random", "linear")
    masks: tuple[bool, ...] = (True, False)
    teachers: tuple[str, ...] = ("dual", "coarse")
    seeds: int = 3
    shapes: tuple[tuple[int, int], ...] = ((1000, 0), (1001, 1), (1002, 2))
    psnr_threshold: float = 12.0
    cells: list[dict] = field(default_factory=list)
    runs: list[dict] = field(default_factory=list)

    def cell(self, schedule: str, mask: bool = True, teacher: str = "dual") -> dict:
        for c in self.cells:
            if (c["schedule"], c["mask"], c["teacher"]) == (schedule, mask, teacher):
                return c
        raise KeyError((schedule, mask, teacher))

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for c in self.cells:
            w.writerow(
                [
                    c["schedule"],
                    "on" if c["mask"] else "off",
                    c["teacher"],
                    c["runs"],
                    c["failures"],
                    f"{c['failure_rate']:.6f}",
                    f"{c['mean_psnr']:.6f}",
                    f"{self.psnr_threshold:g}",
                ]
            )
        return buf.getvalue()

    def runs_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_HEADER)
        for r in self.runs:
            w.writerow([r[k] if not isinstance(r[k], float) else f"{r[k]:.6f}" for k in RUN_HEADER])
        return buf.getvalue()


def _ablation_job(args):
    cfg, teachers = args
    from .pipeline import distill

    if teachers is not None:
        teachers = dataclasses.replace(teachers, class_id=cfg.run.shape_class)
    try:
        record, _ = distill(cfg, teachers)
        return record.status, float(record.metrics["final_psnr"])
    except Exception as exc:  # a broken run is a failed run, never a crashed grid
        logger.warning("ablation run failed: %s", exc)
        return "error", float("nan")


def ablation_config(base: RunConfig, schedule: str, mask: bool, teacher: str, seed: int, shape: tuple[int, int]) -> RunConfig:
    cur = {"schedule": schedule}
    if teacher == "coarse":
        cur["lambda_max"] = 0.0
    return base.replace(
        run={"seed": seed, "shape_seed": shape[0], "shape_class": shape[1], "band_masking": mask},
        curriculum=cur,
    )


def ablate(
    grid: AblationGrid,
    base: RunConfig,
    teachers=None,
    workers: int = 1,
    out_dir: str | Path | None = None,
) -> AblationGrid:
    """Run every (cell, seed, shape) combination and aggregate.

    Seeds are 0..grid.seeds-1. A run fails when it diverges, errors, or ends
    below ``grid.psnr_threshold`` dB. With ``workers > 1`` runs go to a
    process pool and load teachers from the config's checkpoint paths;
    aggregation does not depend on completion order.
    """
    if grid.seeds < 3:
        raise ValueError("an ablation needs at least 3 seeds")
    combos = list(itertools.product(grid.schedules, grid.masks, grid.teachers))
    jobs, keys = [], []
    for sch, msk, tch in combos:
        for seed in range(grid.seeds):
            for shape in grid.shapes:
                cfg = ablation_config(base, sch, msk, tch, seed, shape)
                jobs.append((cfg, None if workers > 1 else teachers))
                keys.append((sch, msk, tch, seed, shape))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    grid.runs = []
    for (sch, msk, tch, seed, shape), (status, p) in zip(keys, results):
        failed = status != "completed" or not (p >= grid.psnr_threshold)
        grid.runs.append(
            dict(
                schedule=sch,
                mask="on" if msk else "off",
                teacher=tch,
                seed=seed,
                shape_seed=shape[0],
                shape_class=shape[1],
                status=status,
                final_psnr=p,
                failed=int(failed),
            )
        )
    grid.cells = []
    for sch, msk, tch in combos:
        rs = [r for r in grid.runs if (r["schedule"], r["mask"], r["teacher"]) == (sch, "on" if msk else "off", tch)]
        ps = [r["final_psnr"] for r in rs if math.isfinite(r["final_psnr"])]
        grid.cells.append(
            dict(
                schedule=sch,
                mask=msk,
                teacher=tch,
                runs=len(rs),
                failures=sum(r["failed"] for r in rs),
                failure_rate=sum(r["failed"] for r in rs) / len(rs),
                mean_psnr=float(np.mean(ps)) if ps else float("nan"),
            )
        )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(grid.csv_text())
        (out / "ablation_runs.csv").write_text(grid.runs_csv_text())
        for c in grid.cells:
            name = f"{c['schedule']}_mask-{'on' if c['mask'] else 'off'}_{c['teacher']}"
            cell_dir = out / name
            cell_dir.mkdir(exist_ok=True)
            sub = AblationGrid(psnr_threshold=grid.psnr_threshold)
            sub.runs = [r for r in grid.runs if (r["schedule"], r["mask"], r["teacher"]) == (c["schedule"], "on" if c["mask"] else "off", c["teacher"])]
            (cell_dir / "runs.csv").write_text(sub.runs_csv_text())
    return grid


# ---------------------------------------------------------------------------
# config-driven entry points (used by the CLI)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def theory_teacher(config: RunConfig):
    """Mixture and an unconditional denoiser trained on samples from it."""
    from .teacher import TeacherTrainConfig, train_teacher

    e = config.experiment
    gmm = two_mode_mixture(e.theory_dim, e.theory_separation, e.theory_std)
    rng = np.random.default_rng(np.random.SeedSequence([config.run.seed, 7]))
    X = gmm.sample(e.theory_samples, rng)
    tcfg = TeacherTrainConfig(
        epochs=10**6,
        batch_size=256,
        hidden=tuple(e.theory_hidden),
        T=config.diffusion.T,
        schedule=config.diffusion.schedule,
        seed=config.run.seed,
        max_steps=e.theory_steps,
    )
    model = train_teacher([(x, Condition.none()) for x in X], "none", tcfg)
    return gmm, model


def run_theory_check(config: RunConfig, out_dir=None) -> TheoryCheck:
    from .diffusion import make_schedule

    sched = make_schedule(config.diffusion.T, config.diffusion.schedule)
    gmm, model = theory_teacher(config)
    res = theory_check(gmm, model, sched, config.run.seed, _floats(config.experiment.theory_deltas), trials=config.experiment.theory_trials)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "theory_curve.csv").write_text(res.trained.csv_text())
        (out / "theory_oracle.csv").write_text(res.oracle.csv_text())
        (out / "theory_summary.csv").write_text(
            "key,value\n"
            f"error_floor,{res.floor:.10g}\n"
            f"epsilon,{res.trained.epsilon:.10g}\n"
            f"minimal_t_nondecreasing,{res.trained.minimal_t_nondecreasing()}\n"
            f"oracle_max_error,{max(e for _, _, e in res.oracle.rows):.10g}\n"
        )
    return res


def heldout_specs(config: RunConfig) -> list[ShapeSpec]:
    """Shapes drawn from a seed the teacher corpus never uses."""
    from .shapes import shape_corpus

    e = config.experiment
    if e.compare_shape_seed == config.teacher.corpus_seed:
        raise ValueError("held-out shape seed must differ from the teacher corpus seed")
    return shape_corpus(e.compare_shape_seed, e.compare_shapes)


def run_variance_check(config: RunConfig, view_teacher, out_dir=None):
    from .diffusion import make_schedule
    from .fileio import write_pgm

    e = config.experiment
    sched = make_schedule(config.diffusion.T, config.diffusion.schedule)
    camera = Camera(teacher_res=config.run.teacher_res)
    spec = heldout_specs(config)[0]
    ref = camera.observe(rasterize(spec, camera.teacher_res, camera), e.variance_angle)
    rng = np.random.default_rng(np.random.SeedSequence([config.run.seed, 11]))
    full, low, outs = variance_check(
        view_teacher,
        Condition.view(e.variance_angle),
        ref,
        e.variance_t,
        e.variance_samples,
        e.variance_downsample,
        sched,
        rng,
        data_range=camera.scale,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "variance.csv").write_text(
            "t,samples,downsample,ssim_full,ssim_low\n"
            f"{e.variance_t},{e.variance_samples},{e.variance_downsample},{full:.10g},{low:.10g}\n"
        )
        write_pgm(np.stack([camera.to_density(o) for o in outs]), out / "denoised_set.pgm")
    return full, low


def run_teacher_compare(config: RunConfig, view_teacher, class_teacher, out_dir=None) -> list[CompareRow]:
    from .diffusion import make_schedule

    e = config.experiment
    sched = make_schedule(config.diffusion.T, config.diffusion.schedule)
    rows = teacher_compare(
        view_teacher,
        class_teacher,
        heldout_specs(config),
        sched,
        np.random.default_rng(np.random.SeedSequence([config.run.seed, 13])),
        t_list=_ints(e.compare_t),
        angles_per_shape=e.compare_angles,
        camera=Camera(teacher_res=config.run.teacher_res),
        density_threshold=e.compare_threshold,
        cfg_scale=e.compare_cfg_scale,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "teacher_compare.csv").write_text(compare_csv(rows))
    return rows


def grid_from_config(config: RunConfig) -> AblationGrid:
    e = config.experiment
    masks = []
    for m in e.ablation_masks.split():
        if m not in ("on", "off"):
            raise ValueError(f"mask axis values are on/off, got {m!r}")
        masks.append(m == "on")
    shapes = []
    for item in e.ablation_shapes.split():
        seed, _, cls = item.partition(":")
        shapes.append((int(seed), int(cls or 0)))
    return AblationGrid(
        schedules=tuple(e.ablation_schedules.split()),
        masks=tuple(masks),
        teachers=tuple(e.ablation_teachers.split()),
        seeds=e.ablation_seeds,
        shapes=tuple(shapes),
        psnr_threshold=config.run.failure_psnr,
    )
