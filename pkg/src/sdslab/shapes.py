"""Synthetic shape corpus: canonically oriented ellipses and rectangles.

Every shape has an elongated body along +x and a small dense "head" disc at
its +x end, so projections depend strongly on the view angle and the front
and back views differ (a 2D stand-in for the frontal-face ambiguity). The
class label names the body type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .student import Camera

CLASS_NAMES = ("ellipse", "rectangle", "tee")
N_CLASSES = len(CLASS_NAMES)
EDGE = 0.015  # soft edge half-width, unit-square units


@dataclass(frozen=True)
class Part:
    kind: str  # "ellipse" | "rect"
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    density: float


@dataclass(frozen=True)
class ShapeSpec:
    class_id: int
    parts: tuple[Part, ...]


def sample_shape(rng: np.random.Generator, class_id: int | None = None) -> ShapeSpec:
    cls = int(rng.integers(N_CLASSES)) if class_id is None else int(class_id)
    theta = rng.uniform(-0.2, 0.2)
    cx, cy = rng.uniform(-0.04, 0.04, size=2)
    dens = rng.uniform(0.7, 0.95)
    ct, st = math.cos(theta), math.sin(theta)
    if cls == 0:
        a, b = rng.uniform(0.26, 0.34), rng.uniform(0.13, 0.18)
        parts = [Part("ellipse", cx, cy, a, b, theta, dens)]
    elif cls == 1:
        a, b = rng.uniform(0.24, 0.32), rng.uniform(0.11, 0.15)
        parts = [Part("rect", cx, cy, a, b, theta, dens)]
    else:
        a, b = rng.uniform(0.24, 0.32), rng.uniform(0.09, 0.12)
        bar_b = rng.uniform(0.18, 0.24)
        parts = [
            Part("rect", cx, cy, a, b, theta, dens),
            Part("rect", cx - (a - 0.05) * ct, cy - (a - 0.05) * st, 0.05, bar_b, theta, dens),
        ]
    r = rng.uniform(0.07, 0.1)
    hx, hy = cx + a * ct, cy + a * st
    parts.append(Part("ellipse", hx, hy, r, r, 0.0, 1.0))
    return ShapeSpec(cls, tuple(parts))


def rasterize(spec: ShapeSpec, R: int, camera: Camera = Camera()) -> np.ndarray:
    """Density on the R x R render grid (pixel j at j / R), values in [0, 1]."""
    c = camera.center(R) / R
    pos = np.arange(R) / R - c
    X, Y = np.meshgrid(pos, pos)  # X varies along columns
    out = np.zeros((R, R))
    for p in spec.parts:
        ct, st = math.cos(p.theta), math.sin(p.theta)
        u = (X - p.cx) * ct + (Y - p.cy) * st
        v = -(X - p.cx) * st + (Y - p.cy) * ct
        if p.kind == "ellipse":
            sd = (np.sqrt((u / p.a) ** 2 + (v / p.b) ** 2) - 1.0) * min(p.a, p.b)
        else:
            sd = np.maximum(np.abs(u) - p.a, np.abs(v) - p.b)
        occ = np.clip(0.5 - sd / (2 * EDGE), 0.0, 1.0)
        out = np.maximum(out, p.density * occ)
    return out


def shape_corpus(seed: int, n: int) -> list[ShapeSpec]:
    rng = np.random.default_rng(seed)
    return [sample_shape(rng) for _ in range(n)]


def projection_pairs(
    specs: list[ShapeSpec],
    cond_kind: str,
    angles_per_shape: int,
    rng: np.random.Generator,
    camera: Camera = Camera(),
    R: int | None = None,
):
    """(observation, Condition) pairs at uniformly random view angles."""
    from .teacher import Condition

    R = camera.teacher_res if R is None else R
    pairs = []
    for spec in specs:
        grid = rasterize(spec, R, camera)
        for ang in rng.uniform(0.0, 2 * math.pi, size=angles_per_shape):
            obs = camera.observe(grid, ang)
            if cond_kind == "view":
                cond = Condition.view(ang)
            elif cond_kind == "class":
                cond = Condition.label(spec.class_id)
            else:
                cond = Condition.none()
            pairs.append((obs, cond))
    return pairs
