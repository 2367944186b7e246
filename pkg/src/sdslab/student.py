"""The student: a coefficient pyramid rendered to 2D density and 1D projections.

The field is a sum of bilinearly upsampled square grids (coarse to fine).
Rendering and projection are linear in the coefficients, so every gradient
here is an exact adjoint rather than autodiff.

Grid convention: render pixel j sits at position j / R of the unit square and
level node m at m / r (left-corner aligned). With doubling resolutions every
coarse render sample coincides with a fine one, which keeps stage upgrades
exact. Projections rotate about pixel ((R - 1) / 2, (R - 1) / 2) by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import EmptyContourError, InvalidArgument

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ViewPose:
    angle: float

    def __post_init__(self):
        object.__setattr__(self, "angle", float(self.angle) % TWO_PI)


def as_angle(pose) -> float:
    return pose.angle if isinstance(pose, ViewPose) else float(pose) % TWO_PI


@lru_cache(maxsize=64)
def upsample_matrix(r: int, R: int) -> np.ndarray:
    """(R, r) linear interpolation matrix, left-corner aligned, edge-clamped."""
    if R < r:
        raise InvalidArgument(f"cannot upsample {r} to smaller {R}")
    u = np.arange(R) * (r / R)
    i0 = np.floor(u).astype(int)
    w = u - i0
    i1 = np.minimum(i0 + 1, r - 1)
    M = np.zeros((R, r))
    np.add.at(M, (np.arange(R), i0), 1.0 - w)
    np.add.at(M, (np.arange(R), i1), w)
    M.setflags(write=False)
    return M


@dataclass
class PyramidField:
    levels: list[np.ndarray]
    render_res: int
    stage: str = "one"

    def __post_init__(self):
        res = self.resolutions
        if any(b <= a for a, b in zip(res, res[1:])):
            raise InvalidArgument(f"level resolutions must increase strictly, got {res}")
        if res and res[-1] > self.render_res:
            raise InvalidArgument(f"level resolution {res[-1]} exceeds render resolution {self.render_res}")

    @classmethod
    def zeros(cls, render_res: int, base: int = 4, stage: str = "one") -> "PyramidField":
        """Doubling resolutions base, 2*base, ..., render_res."""
        res, r = [], base
        while r <= render_res:
            res.append(r)
            r *= 2
        if not res:
            raise InvalidArgument(f"base resolution {base} exceeds render resolution {render_res}")
        return cls([np.zeros((r, r)) for r in res], render_res, stage)

    @property
    def resolutions(self) -> list[int]:
        return [lv.shape[0] for lv in self.levels]

    @property
    def L(self) -> int:
        return len(self.levels)

    def flat(self) -> np.ndarray:
        return np.concatenate([lv.ravel() for lv in self.levels])

    def set_flat(self, vec: np.ndarray) -> None:
        off = 0
        for i, lv in enumerate(self.levels):
            n = lv.size
            self.levels[i] = np.asarray(vec[off : off + n], dtype=np.float64).reshape(lv.shape).copy()
            off += n

    def copy(self) -> "PyramidField":
        return PyramidField([lv.copy() for lv in self.levels], self.render_res, self.stage)


def _mask_or_ones(mask, L: int) -> np.ndarray:
    if mask is None:
        return np.ones(L)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (L,):
        raise InvalidArgument(f"mask has length {mask.shape}, field has {L} levels")
    return mask


def field_render(field: PyramidField, mask=None) -> np.ndarray:
    """sum_i mask_i * upsample(level_i) on the render grid (no clamping)."""
    mask = _mask_or_ones(mask, field.L)
    R = field.render_res
    out = np.zeros((R, R))
    for m, lv in zip(mask, field.levels):
        if m == 0.0:
            continue
        U = upsample_matrix(lv.shape[0], R)
        out += m * (U @ lv @ U.T)
    return out


def render_grad_to_params(field: PyramidField, field_grad: np.ndarray, mask=None) -> list[np.ndarray]:
    """Adjoint of field_render: per-level gradients mask_i * U^T G U."""
    mask = _mask_or_ones(mask, field.L)
    R = field.render_res
    if field_grad.shape != (R, R):
        raise InvalidArgument(f"field gradient shape {field_grad.shape} != ({R}, {R})")
    grads = []
    for m, lv in zip(mask, field.levels):
        r = lv.shape[0]
        if m == 0.0:
            grads.append(np.zeros((r, r)))
            continue
        U = upsample_matrix(r, R)
        grads.append(m * (U.T @ field_grad @ U))
    return grads


def _ray_weights(R: int, angle: float, center: float | None):
    """Flat grid indices and bilinear weights of all R x R ray samples.

    Returns (idx, w) of shape (4, R, R): ray j, sample m, four corners.
    Corners outside the grid get weight zero (field is zero off support).
    """
    c = (R - 1) / 2.0 if center is None else float(center)
    offs = np.arange(R) - (R - 1) / 2.0
    ca, sa = math.cos(angle), math.sin(angle)
    s = offs[:, None]  # detector offset per ray
    u = offs[None, :]  # position along the ray
    x = c + s * ca - u * sa
    y = c + s * sa + u * ca
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(int)
    y0 = y0.astype(int)
    idx = np.empty((4, R, R), dtype=np.int64)
    w = np.empty((4, R, R))
    for k, (dy, dx, wk) in enumerate(
        (
            (0, 0, (1 - fy) * (1 - fx)),
            (0, 1, (1 - fy) * fx),
            (1, 0, fy * (1 - fx)),
            (1, 1, fy * fx),
        )
    ):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < R) & (xx >= 0) & (xx < R)
        idx[k] = np.where(ok, yy * R + xx, 0)
        w[k] = np.where(ok, wk, 0.0)
    return idx, w


def project(field2d: np.ndarray, pose, center: float | None = None) -> np.ndarray:
    """Discrete parallel-beam line integrals: R rays, R unit-spaced samples.

    At angle 0 ray j runs down column j, so the result is the column sums.
    """
    field2d = np.asarray(field2d, dtype=np.float64)
    R = field2d.shape[0]
    if field2d.shape != (R, R):
        raise InvalidArgument(f"projection needs a square grid, got {field2d.shape}")
    idx, w = _ray_weights(R, as_angle(pose), center)
    samples = (field2d.ravel()[idx] * w).sum(axis=0)
    return samples.sum(axis=1)


def project_adjoint(grad_proj: np.ndarray, pose, R: int | None = None, center: float | None = None) -> np.ndarray:
    """Backprojection, the exact transpose of ``project``."""
    grad_proj = np.asarray(grad_proj, dtype=np.float64)
    R = len(grad_proj) if R is None else R
    if grad_proj.shape != (R,):
        raise InvalidArgument(f"projection gradient has shape {grad_proj.shape}, expected ({R},)")
    idx, w = _ray_weights(R, as_angle(pose), center)
    contrib = w * grad_proj[None, :, None]
    return np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=R * R).reshape(R, R)


def upgrade_stage(field: PyramidField, new_render_res: int) -> PyramidField:
    """Stage-two copy of ``field`` rendered at ``new_render_res``.

    Coefficients are kept and zero levels are appended, doubling from the
    finest existing level up to the new render resolution.
    """
    if new_render_res <= field.render_res:
        raise InvalidArgument(f"new resolution {new_render_res} must exceed {field.render_res}")
    levels = [lv.copy() for lv in field.levels]
    r = levels[-1].shape[0] * 2
    while r <= new_render_res:
        levels.append(np.zeros((r, r)))
        r *= 2
    if levels[-1].shape[0] != new_render_res:
        levels.append(np.zeros((new_render_res, new_render_res)))
    return PyramidField(levels, new_render_res, "two")


# ---------------------------------------------------------------------------
# iso-contours


@dataclass
class IsoContour:
    """Closed polygon; vertices are (x, y) = (column, row) pixel coordinates.

    ``corners`` holds, per vertex, the two flat field indices of the grid
    edge the vertex was interpolated on (-1 for padding outside the grid);
    ``field_values`` the values at those corners.
    """

    vertices: np.ndarray
    corners: np.ndarray | None = None
    field_values: np.ndarray | None = None
    iso: float = 0.5
    shape: tuple[int, int] | None = None
    edge_dirs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2 or len(self.vertices) < 3:
            raise InvalidArgument("a contour needs at least 3 (x, y) vertices")
        if not np.all(np.isfinite(self.vertices)):
            raise InvalidArgument("contour vertices must be finite")

    def __len__(self) -> int:
        return len(self.vertices)

    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    def perimeter(self) -> float:
        return float(np.linalg.norm(np.roll(self.vertices, -1, axis=0) - self.vertices, axis=1).sum())


# corner order within a cell: tl, tr, br, bl; edges: top, right, bottom, left
_CORNER_EDGES = {0: (0, 3), 1: (0, 1), 2: (1, 2), 3: (2, 3)}


def extract_contour(field2d: np.ndarray, iso: float = 0.5) -> IsoContour:
    """Marching squares; returns the longest closed component.

    The field is padded with a value below ``iso`` so every component closes.
    Saddle cells are resolved by the cell-centre average.
    """
    f = np.asarray(field2d, dtype=np.float64)
    H, W = f.shape
    pad = min(float(f.min()), iso) - 1.0
    P = np.full((H + 2, W + 2), pad)
    P[1:-1, 1:-1] = f
    above = f > iso
    if not above.any() or above.all():
        raise EmptyContourError(f"field never crosses iso-level {iso}")
    inside = P > iso
    tl, tr = inside[:-1, :-1], inside[:-1, 1:]
    br, bl = inside[1:, 1:], inside[1:, :-1]
    code = tl.astype(int) | (tr.astype(int) << 1) | (br.astype(int) << 2) | (bl.astype(int) << 3)
    adj: dict[tuple, list[tuple]] = {}

    def link(a, b):
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)

    for i, j in zip(*np.nonzero((code != 0) & (code != 15))):
        edges = (("h", i, j), ("v", i, j + 1), ("h", i + 1, j), ("v", i, j))
        cin = (tl[i, j], tr[i, j], br[i, j], bl[i, j])
        crossing = [e for k, e in enumerate(edges) if cin[k] != cin[(k + 1) % 4]]
        if len(crossing) == 2:
            link(*crossing)
            continue
        centre_in = P[i : i + 2, j : j + 2].mean() > iso
        for k in range(4):
            if cin[k] != centre_in:
                a, b = _CORNER_EDGES[k]
                link(edges[a], edges[b])

    def corner_pair(key):
        kind, i, j = key
        return ((i, j), (i, j + 1)) if kind == "h" else ((i, j), (i + 1, j))

    loops = []
    seen = set()
    for start in adj:
        if start in seen:
            continue
        loop, prev, cur = [start], None, start
        seen.add(start)
        while True:
            nxt = [n for n in adj[cur] if n != prev]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            if cur == start:
                break
            seen.add(cur)
            loop.append(cur)
        if len(loop) >= 3:
            loops.append(loop)
    if not loops:
        raise EmptyContourError(f"no closed component at iso-level {iso}")

    def build(loop):
        verts, corners, vals, dirs = [], [], [], []
        for key in loop:
            (ia, ja), (ib, jb) = corner_pair(key)
            fa, fb = P[ia, ja], P[ib, jb]
            s = (iso - fa) / (fb - fa)
            xa, ya = ja - 1.0, ia - 1.0
            dx, dy = jb - ja, ib - ia
            verts.append((xa + s * dx, ya + s * dy))
            corners.append([_flat(ia - 1, ja - 1, H, W), _flat(ib - 1, jb - 1, H, W)])
            vals.append([fa, fb])
            dirs.append((dx, dy))
        return np.array(verts), np.array(corners), np.array(vals), np.array(dirs, dtype=float)

    built = [build(lp) for lp in loops]
    best = max(built, key=lambda b: np.linalg.norm(np.roll(b[0], -1, axis=0) - b[0], axis=1).sum())
    verts, corners, vals, dirs = best
    c = IsoContour(verts, corners, vals, iso, (H, W), dirs)
    if c.area() < 0:
        c = IsoContour(verts[::-1].copy(), corners[::-1].copy(), vals[::-1].copy(), iso, (H, W), dirs[::-1].copy())
    return c


def _flat(i: int, j: int, H: int, W: int) -> int:
    return i * W + j if 0 <= i < H and 0 <= j < W else -1


def contour_vertex_adjoint(contour: IsoContour, g_vertices: np.ndarray) -> np.ndarray:
    """Pull a vertex gradient back onto field values.

    Each vertex is v = p_a + s (p_b - p_a) with s = (iso - f_a) / (f_b - f_a).
    Padding corners carry no gradient.
    """
    H, W = contour.shape
    fa, fb = contour.field_values[:, 0], contour.field_values[:, 1]
    denom = (fb - fa) ** 2
    ds_dfa = (contour.iso - fb) / denom
    ds_dfb = -(contour.iso - fa) / denom
    gs = np.sum(g_vertices * contour.edge_dirs, axis=1)
    out = np.zeros(H * W)
    for col, ds in ((0, ds_dfa), (1, ds_dfb)):
        idx = contour.corners[:, col]
        ok = idx >= 0
        np.add.at(out, idx[ok], (gs * ds)[ok])
    return out.reshape(H, W)


def downsample_points(grid: np.ndarray, factor: int) -> np.ndarray:
    """Point samples at the co-located coarse positions (every factor-th pixel)."""
    return np.asarray(grid)[::factor, ::factor]


def block_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping blocks of ``factor`` along every axis."""
    arr = np.asarray(arr, dtype=np.float64)
    if factor == 1:
        return arr.copy()
    shape = []
    for n in arr.shape:
        if n % factor:
            raise InvalidArgument(f"axis of length {n} not divisible by {factor}")
        shape += [n // factor, factor]
    return arr.reshape(shape).mean(axis=tuple(range(1, 2 * arr.ndim, 2)))


@dataclass(frozen=True)
class Camera:
    """Maps a rendered field to the teacher's observation space and back.

    The observation of a field rendered at resolution R is the projection
    divided by R (mean density along each ray), block-averaged down to
    ``teacher_res`` bins, then mapped affinely by ``scale`` and ``offset``.
    The rotation centre is fixed in physical units so renders at different
    resolutions see the same geometry.
    """

    teacher_res: int = 32
    scale: float = 3.0
    offset: float = -1.0

    def center(self, R: int) -> float:
        return (self.teacher_res - 1) / 2.0 * (R / self.teacher_res)

    def density(self, field2d: np.ndarray, pose) -> np.ndarray:
        """Mean density per teacher bin, before the affine map."""
        R = field2d.shape[0]
        if R % self.teacher_res:
            raise InvalidArgument(f"render resolution {R} not a multiple of teacher resolution {self.teacher_res}")
        p = project(field2d, pose, self.center(R)) / R
        return block_mean(p, R // self.teacher_res)

    def observe(self, field2d: np.ndarray, pose) -> np.ndarray:
        return self.scale * self.density(field2d, pose) + self.offset

    def density_adjoint(self, g_density: np.ndarray, pose, R: int) -> np.ndarray:
        f = R // self.teacher_res
        g = np.repeat(np.asarray(g_density, dtype=np.float64), f) / f
        return project_adjoint(g / R, pose, R, self.center(R))

    def observe_adjoint(self, g_obs: np.ndarray, pose, R: int) -> np.ndarray:
        return self.density_adjoint(self.scale * np.asarray(g_obs, dtype=np.float64), pose, R)

    def to_density(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs) - self.offset) / self.scale


def level_grad_norm(grads: Sequence[np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))
