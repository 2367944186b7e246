"""Score-distillation gradients and the loss terms around them.

The distillation gradient on a rendering x comes in two equivalent forms,

    w(t) * (eps_hat - eps)              (noise residual)
    w(t) / sigma_t * alpha_t * (x - x0_hat)   (reconstruction residual)

where x0_hat is the teacher's denoised estimate. ``dtc_grad`` combines the
view-conditioned (coarse) and class-conditioned (fine) teachers and chains the
result back to the pyramid coefficients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .curriculum import CurriculumState, Gate, GateConfig, band_mask, debias_gate, lambda_at, pose_weight
from .diffusion import NoiseSchedule, ddim_denoise, perturb
from .errors import InvalidArgument, TrainingDivergence
from .student import (
    Camera,
    IsoContour,
    PyramidField,
    as_angle,
    contour_vertex_adjoint,
    extract_contour,
    field_render,
    level_grad_norm,
    render_grad_to_params,
)
from .teacher import Condition, Guided

logger = logging.getLogger(__name__)


@dataclass
class SdsConfig:
    weight_kind: str = "sigma_sq"  # w(t) = sigma_t^2, or "constant"
    cfg_scale_coarse: float = 5.0
    cfg_scale_fine: float = 25.0
    multi_step_switch_t: int = 200
    multi_step_count: int = 4
    pose_w_min: float = 0.5
    gate: GateConfig = field(default_factory=GateConfig)

    def __post_init__(self):
        if self.weight_kind not in ("sigma_sq", "constant"):
            raise InvalidArgument(f"unknown weight kind {self.weight_kind!r}")
        if self.cfg_scale_coarse < 0 or self.cfg_scale_fine < 0:
            raise InvalidArgument("guidance scales must be >= 0")
        if self.multi_step_count < 1:
            raise InvalidArgument("multi_step_count must be >= 1")


@dataclass
class ObjectiveWeights:
    lambda_reg: float = 0.01
    lambda_rec: float = 1.0

    def __post_init__(self):
        if self.lambda_reg < 0 or self.lambda_rec < 0:
            raise InvalidArgument("objective weights must be nonnegative")


def sds_weight(t: int, sched: NoiseSchedule, cfg: SdsConfig) -> float:
    return float(sched.sigma[t] ** 2) if cfg.weight_kind == "sigma_sq" else 1.0


def sds_grad_eps(render, eps_hat, noise, t: int, sched: NoiseSchedule, cfg: SdsConfig) -> np.ndarray:
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if eps_hat.shape != noise.shape or eps_hat.shape != np.shape(render):
        raise InvalidArgument("render, eps_hat and noise must share a shape")
    return sds_weight(t, sched, cfg) * (eps_hat - noise)


def sds_grad_x0(render, x0_hat, t: int, sched: NoiseSchedule, cfg: SdsConfig) -> np.ndarray:
    render = np.asarray(render, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if render.shape != x0_hat.shape:
        raise InvalidArgument("render and x0_hat must share a shape")
    s = sched.sigma[t]
    if s == 0.0:
        return np.zeros_like(render)
    w_bar = sds_weight(t, sched, cfg) / s
    return w_bar * sched.alpha[t] * (render - x0_hat)


@dataclass
class Teachers:
    coarse: Callable
    fine: Callable | None = None
    class_id: int = 0


@dataclass
class DtcResult:
    grads: list[np.ndarray]
    t: int
    lam: float
    gates: tuple[Gate, Gate]
    fine_queried: bool
    norm: float
    obs: np.ndarray
    coarse_norm: float = 0.0
    fine_norm: float = 0.0


def _teacher_residual(teacher, cond, scale, x, x_t, noise, t, sched, cfg: SdsConfig) -> np.ndarray:
    guided = Guided(teacher, scale)
    if t < cfg.multi_step_switch_t:
        x0 = ddim_denoise(x_t, guided, cond, cfg.multi_step_count, sched).data
        return sds_grad_x0(x, x0, t, sched, cfg)
    eps = guided(x_t.data, t, cond)
    return sds_grad_eps(x, eps, noise, t, sched, cfg)


def dtc_grad(
    field: PyramidField,
    pose,
    t: int,
    teachers: Teachers,
    state: CurriculumState,
    cfg: SdsConfig,
    rng: np.random.Generator,
    sched: NoiseSchedule,
    camera: Camera = Camera(),
    ref_angle: float = 0.0,
    gate_rng: np.random.Generator | None = None,
    band_masking: bool = True,
) -> DtcResult:
    """Dual-teacher distillation gradient w.r.t. the pyramid coefficients.

    geo + lambda * tex, each term scaled by the pose weight; the coarse term
    is norm-clipped and the fine term randomly dropped inside their Janus
    bands. The fine teacher is never called while lambda is zero.
    """
    angle = as_angle(pose)
    gate_rng = gate_rng if gate_rng is not None else rng
    mask = band_mask(state.k, state.N, field.L) if band_masking else np.ones(field.L)
    R = field.render_res
    x = camera.observe(field_render(field, mask), angle)
    noise = rng.standard_normal(x.shape)
    x_t = perturb(x, t, noise, sched)
    w_pose = pose_weight(angle, ref_angle, cfg.pose_w_min)
    rel = angle - ref_angle

    def to_params(g_obs):
        return render_grad_to_params(field, camera.observe_adjoint(w_pose * g_obs, angle, R), mask)

    geo = to_params(
        _teacher_residual(teachers.coarse, Condition.view(angle), cfg.cfg_scale_coarse, x, x_t, noise, t, sched, cfg)
    )
    coarse_norm = level_grad_norm(geo)
    g_coarse = debias_gate(rel, "coarse", gate_rng, cfg.gate, state.stage)
    if g_coarse is Gate.CLIP and coarse_norm > cfg.gate.clip_norm:
        geo = [g * (cfg.gate.clip_norm / coarse_norm) for g in geo]

    lam = lambda_at(state)
    g_fine = Gate.PASS
    fine_queried = False
    fine_norm = 0.0
    total = geo
    if lam > 0.0 and teachers.fine is not None:
        g_fine = debias_gate(rel, "fine", gate_rng, cfg.gate, state.stage)
        if g_fine is not Gate.DROP:
            fine_queried = True
            tex = to_params(
                _teacher_residual(
                    teachers.fine, Condition.label(teachers.class_id), cfg.cfg_scale_fine, x, x_t, noise, t, sched, cfg
                )
            )
            fine_norm = level_grad_norm(tex)
            total = [a + lam * b for a, b in zip(geo, tex)]
    norm = level_grad_norm(total)
    if not math.isfinite(norm):
        raise TrainingDivergence("non-finite distillation gradient", k=state.k, t=t, pose=angle)
    return DtcResult(total, t, lam, (g_coarse, g_fine), fine_queried, norm, x, coarse_norm, fine_norm)


# ---------------------------------------------------------------------------
# reference-view reconstruction


@dataclass
class RecWeights:
    value: float = 1.0
    mask: float = 0.5
    pearson: float = 0.1
    sharpness: float = 20.0  # opacity = 1 - exp(-sharpness * density)


@dataclass
class RecResult:
    loss: float
    grad: np.ndarray
    terms: dict
    pearson_skipped: bool = False


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def rec_loss(render_ref, reference, ref_mask, weights: RecWeights | None = None) -> RecResult:
    """Value MSE + mask MSE + (1 - Pearson r) on the reference view.

    Inputs are mean-density projections. The predicted mask is the opacity
    1 - exp(-sharpness * max(density, 0)). When either side has zero variance
    the Pearson term is skipped and ``pearson_skipped`` is set.
    """
    w = weights or RecWeights()
    x = np.asarray(render_ref, dtype=np.float64)
    y = np.asarray(reference, dtype=np.float64)
    m = np.asarray(ref_mask, dtype=np.float64)
    if x.shape != y.shape or x.shape != m.shape:
        raise InvalidArgument("render, reference and mask must share a shape")
    n = x.size
    diff = x - y
    value = float(np.mean(diff**2))
    g = w.value * 2.0 * diff / n

    pos = np.maximum(x, 0.0)
    e = np.exp(-w.sharpness * pos)
    opacity = 1.0 - e
    mdiff = opacity - m
    mask_term = float(np.mean(mdiff**2))
    g += w.mask * 2.0 * mdiff / n * w.sharpness * e * (x > 0)

    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.linalg.norm(xc), np.linalg.norm(yc)
    skipped = nx < 1e-12 or ny < 1e-12
    p_term = 0.0
    if not skipped:
        r = float(np.dot(xc, yc) / (nx * ny))
        p_term = 1.0 - r
        g += w.pearson * -(yc / (nx * ny) - r * xc / nx**2)
    loss = w.value * value + w.mask * mask_term + w.pearson * p_term
    return RecResult(loss, g, {"value": value, "mask": mask_term, "pearson": p_term}, skipped)


# ---------------------------------------------------------------------------
# regularizers


def _bilinear(grid: np.ndarray, pts: np.ndarray):
    """Sample a 2D grid at continuous (row, col) points; returns values and the
    (indices, weights) needed for the adjoint."""
    H, W = grid.shape
    r = np.clip(pts[:, 0], 0, H - 1)
    c = np.clip(pts[:, 1], 0, W - 1)
    r0 = np.minimum(np.floor(r).astype(int), H - 2)
    c0 = np.minimum(np.floor(c).astype(int), W - 2)
    fr, fc = r - r0, c - c0
    idx = np.stack([r0 * W + c0, r0 * W + c0 + 1, (r0 + 1) * W + c0, (r0 + 1) * W + c0 + 1])
    wts = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
    return (grid.ravel()[idx] * wts).sum(axis=0), (idx, wts)


def _bilinear_adjoint(shape, idx, wts, g):
    return np.bincount(idx.ravel(), weights=(wts * g[None]).ravel(), minlength=shape[0] * shape[1]).reshape(shape)


def normal_smooth_loss(field2d, beta: float, rng: np.random.Generator, samples: int = 256, eps: float = 1e-2):
    """E || n(a) - n(a + beta * N(0, I)) ||_1 with n the normalized gradient.

    Gradients are forward differences of the field, bilinearly interpolated
    at the sample points; n = g / sqrt(|g|^2 + eps^2). Returns (loss, d loss /
    d field) with the sample locations frozen.
    """
    f = np.asarray(field2d, dtype=np.float64)
    H, W = f.shape
    if beta <= 0:
        raise InvalidArgument("beta must be positive")
    if H < 3 or W < 3:
        raise InvalidArgument("normal smoothness needs at least a 3x3 field")
    gx = f[:-1, 1:] - f[:-1, :-1]
    gy = f[1:, :-1] - f[:-1, :-1]
    gshape = gx.shape
    hi = np.array([gshape[0] - 1, gshape[1] - 1], dtype=np.float64)
    a = rng.uniform(0.0, 1.0, size=(samples, 2)) * hi
    b = np.clip(a + beta * rng.standard_normal((samples, 2)), 0.0, hi)

    def normals(pts):
        vx, wx = _bilinear(gx, pts)
        vy, wy = _bilinear(gy, pts)
        G = np.stack([vx, vy], axis=1)
        rho = np.sqrt(np.sum(G * G, axis=1) + eps**2)
        return G / rho[:, None], G, rho, wx, wy

    na, Ga, rha, wxa, wya = normals(a)
    nb, Gb, rhb, wxb, wyb = normals(b)
    d = na - nb
    loss = float(np.mean(np.sum(np.abs(d), axis=1)))

    s = np.sign(d) / samples
    ggx = np.zeros(gshape)
    ggy = np.zeros(gshape)
    for gn, G, rho, wx, wy in ((s, Ga, rha, wxa, wya), (-s, Gb, rhb, wxb, wyb)):
        gG = gn / rho[:, None] - G * (np.sum(G * gn, axis=1) / rho**3)[:, None]
        ggx += _bilinear_adjoint(gshape, *wx, gG[:, 0])
        ggy += _bilinear_adjoint(gshape, *wy, gG[:, 1])
    grad = np.zeros_like(f)
    grad[:-1, 1:] += ggx
    grad[:-1, :-1] -= ggx
    grad[1:, :-1] += ggy
    grad[:-1, :-1] -= ggy
    return loss, grad


def uniform_laplacian(vertices: np.ndarray) -> np.ndarray:
    """Rows of L V for a closed polygon: 2 v_i - v_{i-1} - v_{i+1}."""
    V = np.asarray(vertices, dtype=np.float64)
    return 2.0 * V - np.roll(V, 1, axis=0) - np.roll(V, -1, axis=0)


def laplacian_loss(contour: IsoContour | np.ndarray) -> float:
    V = contour.vertices if isinstance(contour, IsoContour) else np.asarray(contour, dtype=np.float64)
    if V.ndim != 2 or len(V) < 3:
        raise InvalidArgument("laplacian loss needs at least 3 vertices")
    return float(np.mean(np.linalg.norm(uniform_laplacian(V), axis=1)))


def laplacian_smooth(vertices: np.ndarray, tau: float) -> np.ndarray:
    """One explicit smoothing step V <- V - tau * L V."""
    V = np.asarray(vertices, dtype=np.float64)
    return V - tau * uniform_laplacian(V)


def laplacian_field_loss(field2d: np.ndarray, iso: float = 0.5):
    """Laplacian loss of the field's iso-contour and its gradient on the field.

    Vertices are measured in unit-square coordinates. A field with no
    crossing contributes zero loss and zero gradient.
    """
    from .errors import EmptyContourError

    f = np.asarray(field2d, dtype=np.float64)
    try:
        contour = extract_contour(f, iso)
    except EmptyContourError:
        return 0.0, np.zeros_like(f)
    R = f.shape[0]
    V = contour.vertices / R
    LV = uniform_laplacian(V)
    norms = np.linalg.norm(LV, axis=1)
    n = len(V)
    q = np.where(norms[:, None] > 1e-15, LV / np.maximum(norms, 1e-15)[:, None], 0.0) / n
    gV = uniform_laplacian(q) / R
    return float(norms.mean()), contour_vertex_adjoint(contour, gV)
