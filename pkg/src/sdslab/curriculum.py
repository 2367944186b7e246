"""Time-step curriculum: annealed t schedule, band mask, lambda ramp, pose gates."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import InvalidArgument
from .student import as_angle

SCHEDULES = ("annealed", "random", "linear")


@dataclass(frozen=True)
class CurriculumState:
    """Iteration counter plus every schedule constant.

    ``schedule`` selects how t is drawn: ``annealed`` (log midpoint decay with
    a shrinking jitter interval), ``linear`` (same interval, linear midpoint)
    or ``random`` (uniform on [t_min, t_max] throughout).
    """

    k: int = 0
    N: int = 3000
    l: int = 300
    t_max: int = 980
    t_min: int = 20
    delta_max: int = 100
    delta_min: int = 10
    stage: str = "one"
    L: int = 6
    lambda_max: float = 0.5
    log_base: float = 2.0
    schedule: str = "annealed"
    T: int = 1000

    def __post_init__(self):
        if not 0 <= self.k <= self.N:
            raise InvalidArgument(f"iteration {self.k} outside [0, {self.N}]")
        if not 0 < self.t_min < self.t_max <= self.T:
            raise InvalidArgument(f"need 0 < t_min < t_max <= T, got {self.t_min}, {self.t_max}, {self.T}")
        if self.l < 1:
            raise InvalidArgument("step length must be >= 1")
        if self.delta_min > self.delta_max:
            raise InvalidArgument("delta_min exceeds delta_max")
        if self.stage not in ("one", "two"):
            raise InvalidArgument(f"unknown stage {self.stage!r}")
        if self.schedule not in SCHEDULES:
            raise InvalidArgument(f"unknown schedule {self.schedule!r}")

    def advance(self) -> "CurriculumState":
        return replace(self, k=min(self.k + 1, self.N))

    def at(self, k: int) -> "CurriculumState":
        return replace(self, k=k)

    @property
    def progress(self) -> float:
        """Quantized fraction floor(k / l) * l / N."""
        if self.N == 0:
            return 0.0
        return (self.k // self.l) * self.l / self.N


def t_mid(state: CurriculumState) -> int:
    """round(t_max - (t_max - t_min) * log_b(1 + floor(k/l) * l / N))."""
    frac = state.progress
    if state.schedule == "linear":
        decay = frac
    else:
        decay = math.log(1.0 + frac) / math.log(state.log_base)
    return int(round(state.t_max - (state.t_max - state.t_min) * decay))


def interval_radius(state: CurriculumState) -> int:
    frac = state.k / state.N if state.N else 0.0
    return int(round(state.delta_max + (state.delta_min - state.delta_max) * frac))


def sample_t(state: CurriculumState, rng: np.random.Generator, size: int | None = None):
    """Uniform integer in [t_mid - delta, t_mid + delta] clipped to [t_min, t_max];
    the ``random`` schedule draws from the whole [t_min, t_max] range.

    With ``size`` an array of independent draws is returned.
    """
    if state.schedule == "random":
        lo, hi = state.t_min, state.t_max
    else:
        mid = t_mid(state)
        delta = interval_radius(state)
        lo = max(state.t_min, mid - delta)
        hi = min(state.t_max, mid + delta)
    if size is None:
        return int(rng.integers(lo, hi + 1))
    return rng.integers(lo, hi + 1, size=size)


def band_mask(k: int, N: int, L: int) -> np.ndarray:
    """m_i = 1 iff i <= 4 + min(floor(10k/N), L - 4), i counted from 1."""
    if L < 1 or not 0 <= k <= N:
        raise InvalidArgument(f"invalid band mask arguments k={k}, N={N}, L={L}")
    step = (10 * k) // N if N else 0
    visible = 4 + max(0, min(step, L - 4))
    return (np.arange(1, L + 1) <= visible).astype(np.float64)


def lambda_at(state: CurriculumState) -> float:
    if state.stage == "one":
        return 0.0
    ramp = (state.t_max - t_mid(state)) / (state.t_max - state.t_min)
    return float(np.clip(state.lambda_max * ramp, 0.0, state.lambda_max))


def angular_distance(a, b) -> float:
    d = abs(as_angle(a) - as_angle(b)) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def pose_weight(angle, ref, w_min: float) -> float:
    """w_min at the reference view rising linearly to 1 at the opposite view."""
    if not 0.0 <= w_min <= 1.0:
        raise InvalidArgument("w_min must lie in [0, 1]")
    return w_min + (1.0 - w_min) * angular_distance(angle, ref) / math.pi


class Gate(Enum):
    PASS = "pass"
    CLIP = "clip"
    DROP = "drop"


@dataclass(frozen=True)
class GateConfig:
    clip_norm: float = 1.0
    drop_prob: float = 0.5
    coarse_range: tuple[float, float] = (11 * math.pi / 12, 13 * math.pi / 12)
    fine_range: tuple[float, float] = (math.pi / 6, math.pi / 4)


def debias_gate(rel_angle: float, teacher: str, rng: np.random.Generator, cfg: GateConfig, stage: str = "two") -> Gate:
    """Janus de-biasing action for one teacher term at one view.

    The coarse teacher is clipped around the back view; the fine teacher is
    randomly dropped in the side bands on either side of the reference.
    Only stage two gates anything.
    """
    if stage != "two":
        return Gate.PASS
    rel = as_angle(rel_angle)
    if teacher == "coarse":
        lo, hi = cfg.coarse_range
        return Gate.CLIP if lo <= rel <= hi else Gate.PASS
    if teacher == "fine":
        wrapped = abs(rel - 2 * math.pi if rel > math.pi else rel)
        lo, hi = cfg.fine_range
        if lo <= wrapped <= hi and rng.random() < cfg.drop_prob:
            return Gate.DROP
        return Gate.PASS
    raise InvalidArgument(f"unknown teacher {teacher!r}")
