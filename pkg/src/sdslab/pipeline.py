"""Two-stage distillation driver.

Each iteration either fits the reference view (probability ``ref_prob``) or
distills teacher guidance at a uniformly random unseen view, adds the
stage's smoothness regularizer and takes one AdamW step on the pyramid.
Stage one renders at low resolution with the view teacher only; stage two
upgrades the pyramid, renders at high resolution and mixes in the class
teacher.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config
from .curriculum import CurriculumState, GateConfig, band_mask, lambda_at, sample_t
from .diffusion import NoiseSchedule, make_schedule
from .errors import TrainingDivergence
from .fileio import load_checkpoint, write_pgm
from .metrics import mask_iou, psnr
from .optim import AdamConfig, AdamState, optimizer_step
from .sds import (
    RecWeights,
    SdsConfig,
    Teachers,
    dtc_grad,
    laplacian_field_loss,
    normal_smooth_loss,
    rec_loss,
)
from .shapes import N_CLASSES, ShapeSpec, projection_pairs, rasterize, sample_shape, shape_corpus
from .student import Camera, PyramidField, field_render, level_grad_norm, render_grad_to_params, upgrade_stage
from .teacher import Condition, ConditionalGmmTeacher, DenoiserModel, TeacherTrainConfig, denoising_loss, train_teacher

logger = logging.getLogger(__name__)

ROW_FIELDS = (
    "k",
    "stage",
    "k_stage",
    "branch",
    "t",
    "angle",
    "lam",
    "loss_rec",
    "loss_reg",
    "grad_norm",
    "gate_coarse",
    "gate_fine",
)
STREAMS = ("branch", "pose", "t", "noise", "gate", "reg")


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    status: str = "completed"
    message: str = ""

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(row[k]) for k in ROW_FIELDS})
        return buf.getvalue()

    def metrics_text(self) -> str:
        buf = io.StringIO()
        buf.write("key,value\n")
        buf.write(f"status,{self.status}\n")
        for k in sorted(self.metrics):
            buf.write(f"{k},{_fmt(self.metrics[k])}\n")
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def stage_streams(seed: int, stage: str) -> dict[str, np.random.Generator]:
    """Independent generators per subsystem, derived from (seed, stage)."""
    ss = np.random.SeedSequence([int(seed), 1 if stage == "one" else 2])
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, ss.spawn(len(STREAMS)))}


@dataclass
class RunContext:
    """Everything fixed for one run."""

    config: RunConfig
    teachers: Teachers
    sched: NoiseSchedule
    camera: Camera
    ref_density: np.ndarray
    ref_mask: np.ndarray
    ground_truth: ShapeSpec

    @property
    def sds_cfg(self) -> SdsConfig:
        s = self.config.sds
        return SdsConfig(
            s.weight_kind,
            s.cfg_scale_coarse,
            s.cfg_scale_fine,
            s.multi_step_switch_t,
            s.multi_step_count,
            s.pose_w_min,
            GateConfig(clip_norm=s.clip_norm, drop_prob=s.drop_prob),
        )

    @property
    def rec_weights(self) -> RecWeights:
        o = self.config.objective
        return RecWeights(o.rec_value, o.rec_mask, o.rec_pearson, o.mask_sharpness)


def curriculum_state(config: RunConfig, N: int, stage: str, L: int, k: int = 0) -> CurriculumState:
    c = config.curriculum
    step = c.step_length if c.step_length > 0 else max(1, N // 10)
    return CurriculumState(
        k=k,
        N=N,
        l=step,
        t_max=c.t_max,
        t_min=c.t_min,
        delta_max=c.delta_max,
        delta_min=c.delta_min,
        stage=stage,
        L=L,
        lambda_max=c.lambda_max,
        log_base=c.log_base,
        schedule=c.schedule,
        T=config.diffusion.T,
    )


def _regularizer(kind: str, f2d: np.ndarray, ctx: RunContext, rng: np.random.Generator):
    o = ctx.config.objective
    loss, grad = 0.0, np.zeros_like(f2d)
    if kind in ("normal", "both"):
        l1, g1 = normal_smooth_loss(f2d, o.normal_beta, rng, o.normal_samples, o.normal_eps)
        loss += l1
        grad += g1
    if kind in ("laplacian", "both"):
        l2, g2 = laplacian_field_loss(f2d, o.iso)
        loss += l2
        grad += g2
    return loss, grad


def run_stage(field: PyramidField, ctx: RunContext, stage: str, record: RunRecord, k_offset: int = 0) -> PyramidField:
    """Optimize ``field`` for one stage; appends one row per iteration.

    On divergence the record's status becomes ``diverged`` and the field
    from the last finite iterate is returned.
    """
    cfg = ctx.config
    run = cfg.run
    N = run.iterations_stage1 if stage == "one" else run.iterations_stage2
    if N == 0:
        return field
    rngs = stage_streams(run.seed, stage)
    opt_cfg = AdamConfig(lr=run.lr, weight_decay=run.weight_decay)
    opt_state = AdamState.zeros_like(field.flat())
    sds_cfg = ctx.sds_cfg
    reg_kind = run.reg_stage1 if stage == "one" else run.reg_stage2
    R = field.render_res
    big_grad_streak = 0
    for k in range(N):
        state = curriculum_state(cfg, N, stage, field.L, k)
        mask = band_mask(k, N, field.L) if run.band_masking else np.ones(field.L)
        row = dict(k=k_offset + k, stage=stage, k_stage=k, t=-1, angle=run.ref_angle, lam=lambda_at(state))
        row.update(loss_rec=0.0, loss_reg=0.0, gate_coarse="-", gate_fine="-")
        f2d = None
        if rngs["branch"].random() < run.ref_prob:
            row["branch"] = "ref"
            f2d = field_render(field, mask)
            d = ctx.camera.density(f2d, run.ref_angle)
            rec = rec_loss(d, ctx.ref_density, ctx.ref_mask, ctx.rec_weights)
            row["loss_rec"] = rec.loss
            g_field = ctx.camera.density_adjoint(cfg.objective.lambda_rec * rec.grad, run.ref_angle, R)
            grads = render_grad_to_params(field, g_field, mask)
            do_reg = run.regularize_ref
        else:
            row["branch"] = "unseen"
            angle = float(rngs["pose"].uniform(0.0, 2 * math.pi))
            t = sample_t(state, rngs["t"])
            row.update(angle=angle, t=t)
            try:
                res = dtc_grad(
                    field,
                    angle,
                    t,
                    ctx.teachers,
                    state,
                    sds_cfg,
                    rngs["noise"],
                    ctx.sched,
                    ctx.camera,
                    run.ref_angle,
                    rngs["gate"],
                    run.band_masking,
                )
            except TrainingDivergence as exc:
                record.status = "diverged"
                record.message = f"{exc} {exc.context}"
                return field
            grads = res.grads
            row.update(gate_coarse=res.gates[0].value, gate_fine=res.gates[1].value)
            do_reg = run.regularize_unseen
        if do_reg and reg_kind != "none" and cfg.objective.lambda_reg > 0:
            if f2d is None:
                f2d = field_render(field, mask)
            reg_loss, reg_grad = _regularizer(reg_kind, f2d, ctx, rngs["reg"])
            row["loss_reg"] = reg_loss
            reg_levels = render_grad_to_params(field, cfg.objective.lambda_reg * reg_grad, mask)
            grads = [a + b for a, b in zip(grads, reg_levels)]
        gnorm = level_grad_norm(grads)
        row["grad_norm"] = gnorm
        record.rows.append(row)
        if not math.isfinite(gnorm):
            record.status = "diverged"
            record.message = f"non-finite gradient at k={k_offset + k}"
            return field
        big_grad_streak = big_grad_streak + 1 if gnorm > run.divergence_grad_norm else 0
        if big_grad_streak >= run.divergence_patience:
            record.status = "diverged"
            record.message = f"gradient norm above {run.divergence_grad_norm:g} for {big_grad_streak} iterations"
            return field
        flat = np.concatenate([g.ravel() for g in grads])
        new = optimizer_step(field.flat(), flat, opt_state, opt_cfg)
        if not np.all(np.isfinite(new)):
            record.status = "diverged"
            record.message = f"non-finite parameters at k={k_offset + k}"
            return field
        field.set_flat(new)
    return field


def ground_truth_spec(config: RunConfig) -> ShapeSpec:
    rng = np.random.default_rng(config.run.shape_seed)
    return sample_shape(rng, config.run.shape_class)


def oracle_teachers(specs: list[ShapeSpec], camera: Camera, std: float, sched: NoiseSchedule, n_angles: int = 16) -> Teachers:
    """Exact mixture teachers over the observations of ``specs``.

    The view oracle's components are the specs' observations at the queried
    angle; unconditional and class queries mix over ``n_angles`` views.
    """
    grids = [rasterize(s, camera.teacher_res, camera) for s in specs]
    ring = np.arange(n_angles) * (2 * math.pi / n_angles)

    def means(cond: Condition) -> np.ndarray:
        if cond.kind == "view":
            return np.stack([camera.observe(g, cond.angle) for g in grids])
        pool = [g for g, s in zip(grids, specs) if cond.kind != "class" or s.class_id == cond.class_id] or grids
        return np.stack([camera.observe(g, a) for g in pool for a in ring])

    view = ConditionalGmmTeacher(means, std, sched)
    return Teachers(view, view, specs[0].class_id)


def load_teachers(config: RunConfig, sched: NoiseSchedule, camera: Camera) -> Teachers:
    run = config.run
    if run.teacher_source == "oracle":
        return oracle_teachers([ground_truth_spec(config)], camera, run.oracle_std, sched)
    view = load_checkpoint(run.view_teacher)
    fine = load_checkpoint(run.class_teacher)
    return Teachers(view, fine, run.shape_class)


def make_context(config: RunConfig, teachers: Teachers | None = None) -> RunContext:
    run = config.run
    sched = make_schedule(config.diffusion.T, config.diffusion.schedule)
    camera = Camera(teacher_res=run.teacher_res)
    spec = ground_truth_spec(config)
    if teachers is None:
        teachers = load_teachers(config, sched, camera)
    ref_res = max(run.render_res_stage1, run.render_res_stage2)
    ref_density = camera.density(rasterize(spec, ref_res, camera), run.ref_angle)
    ref_mask = (ref_density > config.objective.ref_mask_threshold).astype(np.float64)
    return RunContext(config, teachers, sched, camera, ref_density, ref_mask, spec)


def field_metrics(field: PyramidField, spec: ShapeSpec, camera: Camera, prefix: str = "") -> dict:
    f2d = np.clip(field_render(field), 0.0, 1.0)
    gt = rasterize(spec, field.render_res, camera)
    return {f"{prefix}psnr": psnr(f2d, gt), f"{prefix}mask_iou": mask_iou(f2d, gt, 0.3)}


def distill(config: RunConfig, teachers: Teachers | None = None, out_dir: str | Path | None = None):
    """Run both stages; returns (RunRecord, final field).

    Missing teacher checkpoints raise FileNotFoundError before any work is
    done. Divergence is reported in the record, never raised.
    """
    config.validate()
    ctx = make_context(config, teachers)
    run = config.run
    field = PyramidField.zeros(run.render_res_stage1, run.base_res, "one")
    record = RunRecord()
    record.metrics.update(field_metrics(field, ctx.ground_truth, ctx.camera, "initial_"))
    field = run_stage(field, ctx, "one", record)
    if record.status == "completed" and run.render_res_stage2 > run.render_res_stage1:
        field = upgrade_stage(field, run.render_res_stage2)
        field = run_stage(field, ctx, "two", record, k_offset=run.iterations_stage1)
    record.metrics.update(field_metrics(field, ctx.ground_truth, ctx.camera, "final_"))
    record.metrics["rows"] = len(record.rows)
    if out_dir is not None:
        write_outputs(record, field, config, out_dir)
    return record, field


def write_outputs(record: RunRecord, field: PyramidField, config: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_record.csv").write_text(record.csv_text())
    (out / "metrics.csv").write_text(record.metrics_text())
    (out / "config_echo.cfg").write_text(dump_config(config))
    write_pgm(field_render(field), out / "final_field.pgm")


def teacher_train_config(config: RunConfig) -> TeacherTrainConfig:
    t = config.teacher
    return TeacherTrainConfig(
        epochs=t.epochs,
        batch_size=t.batch_size,
        lr=t.lr,
        weight_decay=t.weight_decay,
        cond_dropout=t.cond_dropout,
        hidden=tuple(t.hidden),
        T=config.diffusion.T,
        schedule=config.diffusion.schedule,
        seed=config.run.seed,
        max_steps=t.max_steps or None,
    )


def train_teachers(config: RunConfig) -> tuple[DenoiserModel, DenoiserModel]:
    """Train the view- and class-conditioned teachers on one shared corpus.

    Both see the same shapes at the same angles; only the condition differs.
    """
    t = config.teacher
    camera = Camera(teacher_res=config.run.teacher_res)
    specs = shape_corpus(t.corpus_seed, t.n_shapes)
    view_pairs = projection_pairs(specs, "view", t.angles_per_shape, np.random.default_rng(t.corpus_seed), camera)
    class_pairs = projection_pairs(specs, "class", t.angles_per_shape, np.random.default_rng(t.corpus_seed), camera)
    tcfg = teacher_train_config(config)
    view = train_teacher(view_pairs, "view", tcfg)
    fine = train_teacher(class_pairs, "class", tcfg, n_classes=N_CLASSES)
    return view, fine


def heldout_losses(config: RunConfig, view: DenoiserModel, fine: DenoiserModel, sched: NoiseSchedule) -> str:
    """CSV of held-out eps-MSE per teacher at t in {200, 500, 800}, with and
    without the condition."""
    camera = Camera(teacher_res=config.run.teacher_res)
    specs = shape_corpus(config.experiment.compare_shape_seed, config.experiment.compare_shapes)
    lines = ["teacher,t,loss_cond,loss_null"]
    for name, model, kind in (("view", view, "view"), ("class", fine, "class")):
        pairs = projection_pairs(specs, kind, 4, np.random.default_rng(1), camera)
        X = np.stack([p[0] for p in pairs])
        conds = [p[1] for p in pairs]
        for t in (200, 500, 800):
            lc = denoising_loss(model, X, conds, t, sched, np.random.default_rng(t))
            ln = denoising_loss(model, X, [Condition.none()] * len(X), t, sched, np.random.default_rng(t))
            lines.append(f"{name},{t},{lc:.10g},{ln:.10g}")
    return "\n".join(lines) + "\n"
