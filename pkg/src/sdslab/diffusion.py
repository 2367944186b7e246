"""Discrete-time diffusion machinery.

Noise schedules, forward perturbation x_t = alpha_t * x0 + sigma_t * eps,
conversion between the eps-prediction and the clean-sample estimate, and the
deterministic DDIM update used for multi-step denoising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import InvalidArgument, SingularScheduleError

# teacher(data, t, cond) -> eps_hat, same shape as data
Denoiser = Callable[[np.ndarray, int, Any], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Tabulated alpha_t / sigma_t for t = 0..T.

    With ``variance_exploding`` set, alpha is identically one and x_t is
    x0 + sigma_t * eps; this mode exists for checking the alpha-free form of
    the distillation gradient and does not satisfy the VP identity.
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    kind: str = "cosine"
    variance_exploding: bool = False

    def __post_init__(self):
        for arr in (self.alpha, self.sigma):
            arr.setflags(write=False)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise InvalidArgument(f"time step {t} outside [0, {self.T}]")
        return t


def make_schedule(T: int = 1000, kind: str = "cosine", variance_exploding: bool = False) -> NoiseSchedule:
    """Build a schedule with ``T`` steps.

    ``cosine`` follows the squared-cosine cumulative signal curve with the
    per-step beta clipped at 0.999 so alpha_T stays positive. ``linear_beta``
    uses the DDPM linear betas, rescaled so the total noise matches T=1000.
    """
    if int(T) != T or T < 2:
        raise InvalidArgument(f"schedule needs T >= 2, got {T}")
    T = int(T)
    if kind == "cosine":
        s = 0.008
        ts = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((ts + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 0.0, 0.999)
    elif kind == "linear_beta":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T)
        betas = np.clip(betas, 1e-8, 0.999)
    else:
        raise InvalidArgument(f"unknown schedule kind {kind!r}")
    abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alpha = np.sqrt(abar)
    sigma = np.sqrt(np.clip(1.0 - abar, 0.0, None))
    if variance_exploding:
        sigma = sigma / alpha
        alpha = np.ones_like(alpha)
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma, kind=kind, variance_exploding=variance_exploding)


@dataclass
class NoisySample:
    data: np.ndarray
    t: int


@dataclass
class DenoisedEstimate:
    data: np.ndarray
    steps_used: int = 1


def perturb(x0, t: int, noise, sched: NoiseSchedule) -> NoisySample:
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise InvalidArgument(f"shape mismatch: x0 {x0.shape} vs noise {noise.shape}")
    t = sched.check_t(t)
    return NoisySample(sched.alpha[t] * x0 + sched.sigma[t] * noise, t)


def eps_to_x0(x_t: NoisySample, eps_hat, sched: NoiseSchedule) -> DenoisedEstimate:
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != np.shape(x_t.data):
        raise InvalidArgument(f"shape mismatch: x_t {np.shape(x_t.data)} vs eps {eps_hat.shape}")
    t = sched.check_t(x_t.t)
    a = sched.alpha[t]
    if a == 0.0:
        raise SingularScheduleError(f"alpha_{t} = 0; clean estimate undefined")
    return DenoisedEstimate((x_t.data - sched.sigma[t] * eps_hat) / a, 1)


def ddim_step(x_t: NoisySample, eps_hat, r: int, sched: NoiseSchedule) -> NoisySample:
    """Deterministic DDIM move from x_t to x_r (r < t) at fixed eps_hat."""
    r = sched.check_t(r)
    if r >= x_t.t:
        raise InvalidArgument(f"ddim_step needs r < t, got r={r}, t={x_t.t}")
    x0 = eps_to_x0(x_t, eps_hat, sched).data
    return NoisySample(sched.alpha[r] * x0 + sched.sigma[r] * np.asarray(eps_hat, dtype=np.float64), r)


def ddim_grid(t: int, steps: int) -> list[int]:
    """Uniform descending time grid t = t_0 > t_1 > ... > 0."""
    steps = min(steps, t)
    grid = np.rint(np.linspace(t, 0, steps + 1)).astype(int)
    return [int(g) for g in grid]


def ddim_denoise(x_t: NoisySample, teacher: Denoiser, cond, steps: int, sched: NoiseSchedule) -> DenoisedEstimate:
    """Multi-step deterministic denoising of ``x_t`` down to t = 0.

    Uses ``steps`` uniform sub-steps; when t < steps the chain is shortened
    to t unit steps (the grid is integral). At t = 0 the sample is returned
    after one teacher call, as eps_to_x0 would.
    """
    if steps < 1:
        raise InvalidArgument(f"steps must be >= 1, got {steps}")
    t = sched.check_t(x_t.t)
    if t == 0:
        eps = teacher(np.asarray(x_t.data), 0, cond)
        return eps_to_x0(x_t, eps, sched)
    grid = ddim_grid(t, steps)
    cur = NoisySample(np.asarray(x_t.data, dtype=np.float64), t)
    for r in grid[1:]:
        eps = teacher(cur.data, cur.t, cond)
        cur = ddim_step(cur, eps, r, sched)
    return DenoisedEstimate(cur.data, len(grid) - 1)
