import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdslab.errors import EmptyContourError, InvalidArgument
from sdslab.shapes import rasterize, sample_shape, shape_corpus
from sdslab.student import (
    Camera,
    IsoContour,
    PyramidField,
    ViewPose,
    block_mean,
    extract_contour,
    field_render,
    project,
    project_adjoint,
    render_grad_to_params,
    upgrade_stage,
)


def random_field(render_res=32, seed=0, base=4):
    f = PyramidField.zeros(render_res, base)
    r = np.random.default_rng(seed)
    f.set_flat(r.standard_normal(f.flat().size))
    return f


# --- pyramid ----------------------------------------------------------------


def test_pyramid_layout():
    f = PyramidField.zeros(128)
    assert f.resolutions == [4, 8, 16, 32, 64, 128] and f.L == 6
    with pytest.raises(InvalidArgument):
        PyramidField([np.zeros((8, 8)), np.zeros((4, 4))], 8)


def test_render_trivial_cases():
    f = random_field()
    assert np.array_equal(field_render(PyramidField.zeros(32)), np.zeros((32, 32)))
    assert np.array_equal(field_render(f, np.zeros(f.L)), np.zeros((32, 32)))
    c = PyramidField.zeros(32)
    c.levels[0][:] = 0.7
    assert np.allclose(field_render(c, [1, 0, 0, 0]), 0.7, atol=1e-15)


def test_render_grad_is_adjoint_of_render():
    f = random_field(seed=1)
    mask = np.array([1, 1, 0, 1])
    G = np.random.default_rng(2).standard_normal((32, 32))
    grads = render_grad_to_params(f, G, mask)
    lhs = float(np.sum(field_render(f, mask) * G))
    rhs = sum(float(np.sum(lv * g)) for lv, g in zip(f.levels, grads))
    assert lhs == pytest.approx(rhs, rel=1e-12)
    assert not np.any(grads[2])
    assert all(not np.any(g) for g in render_grad_to_params(f, np.zeros((32, 32)), mask))


def test_render_grad_finite_differences_per_level():
    camera = Camera(teacher_res=16)
    f = random_field(seed=3)
    y = np.random.default_rng(4).standard_normal(16)

    def objective(field):
        return float(y @ camera.observe(field_render(field), 0.8))

    grads = render_grad_to_params(f, camera.observe_adjoint(y, 0.8, 32))
    r = np.random.default_rng(5)
    h = 1e-6
    for li, lv in enumerate(f.levels):
        for _ in range(5):
            i, j = r.integers(0, lv.shape[0], 2)
            fp, fm = f.copy(), f.copy()
            fp.levels[li][i, j] += h
            fm.levels[li][i, j] -= h
            num = (objective(fp) - objective(fm)) / (2 * h)
            ana = grads[li][i, j]
            assert abs(num - ana) <= 1e-5 * max(abs(num), abs(ana), 1e-6)


# --- projection ---------------------------------------------------------


def test_project_examples():
    assert np.allclose(project(np.ones((4, 4)), 0.0), [4, 4, 4, 4])
    g = np.zeros((6, 6))
    g[2, 3] = 1.0
    assert np.allclose(project(g, ViewPose(0.0)), np.eye(6)[3])


def test_project_reversal_at_pi():
    g = np.random.default_rng(0).random((16, 16))
    assert np.max(np.abs(project(g, math.pi) - project(g, 0.0)[::-1])) < 1e-6


def test_adjoint_identity_random_triples():
    r = np.random.default_rng(7)
    for _ in range(20):
        R = int(r.choice([8, 16, 32]))
        f, y, a = r.standard_normal((R, R)), r.standard_normal(R), r.uniform(0, 2 * math.pi)
        lhs = float(project(f, a) @ y)
        rhs = float(np.sum(f * project_adjoint(y, a)))
        assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), 1e-12)


def test_adjoint_examples():
    assert np.array_equal(project_adjoint(np.zeros(8), 1.3), np.zeros((8, 8)))
    col = project_adjoint(np.eye(8)[5], 0.0)
    expected = np.zeros((8, 8))
    expected[:, 5] = 1.0
    assert np.allclose(col, expected)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_projection_linear(angle, a, b, seed):
    r = np.random.default_rng(seed)
    f, g = r.standard_normal((12, 12)), r.standard_normal((12, 12))
    lhs = project(a * f + b * g, angle)
    rhs = a * project(f, angle) + b * project(g, angle)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


# --- stage upgrade --------------------------------------------------------


def test_upgrade_stage_examples():
    z = upgrade_stage(PyramidField.zeros(32), 128)
    assert z.render_res == 128 and z.stage == "two" and not np.any(field_render(z))
    c = PyramidField.zeros(32)
    c.levels[0][:] = 0.4
    assert np.allclose(field_render(upgrade_stage(c, 128)), 0.4)
    with pytest.raises(InvalidArgument):
        upgrade_stage(c, 32)


def test_upgrade_preserves_coarse_samples():
    f = random_field(seed=11)
    old = field_render(f)
    new = upgrade_stage(f, 128)
    assert all(np.array_equal(a, b) for a, b in zip(f.levels, new.levels))
    # co-located samples: new pixel 4j sits at old pixel j
    assert np.max(np.abs(field_render(new)[::4, ::4] - old)) < 1e-6


# --- contours -------------------------------------------------------------


def test_contour_of_disk_area():
    yy, xx = np.mgrid[0:64, 0:64]
    disk = ((xx - 31.5) ** 2 + (yy - 31.5) ** 2 <= 100).astype(float)
    c = extract_contour(disk, 0.5)
    assert abs(abs(c.area()) - math.pi * 100) <= 0.1 * math.pi * 100


def test_contour_of_square_bbox():
    g = np.zeros((32, 32))
    g[8:20, 10:26] = 1.0
    v = extract_contour(g, 0.5).vertices
    assert abs(v[:, 0].min() - 10) <= 1 and abs(v[:, 0].max() - 25) <= 1
    assert abs(v[:, 1].min() - 8) <= 1 and abs(v[:, 1].max() - 19) <= 1


def test_contour_constant_field_raises():
    with pytest.raises(EmptyContourError):
        extract_contour(np.full((8, 8), 0.2), 0.5)


def test_contour_invariants():
    c = extract_contour(rasterize(sample_shape(np.random.default_rng(0), 2), 64), 0.3)
    assert len(c) >= 3 and np.all(np.isfinite(c.vertices))
    with pytest.raises(InvalidArgument):
        IsoContour(np.zeros((2, 2)))


# --- camera and shapes --------------------------------------------------


def test_camera_observation_resolution_independent():
    spec = sample_shape(np.random.default_rng(3), 0)
    cam = Camera()
    a = cam.observe(rasterize(spec, 32, cam), 1.1)
    b = cam.observe(rasterize(spec, 128, cam), 1.1)
    assert np.max(np.abs(a - b)) < 0.1


def test_camera_adjoint():
    cam = Camera(teacher_res=8)
    r = np.random.default_rng(0)
    f, y = r.standard_normal((32, 32)), r.standard_normal(8)
    lhs = float(cam.observe(f, 2.0) @ y) - cam.offset * y.sum()
    rhs = float(np.sum(f * cam.observe_adjoint(y, 2.0, 32)))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_block_mean():
    assert np.array_equal(block_mean(np.arange(8.0), 4), [1.5, 5.5])


def test_shape_generator_deterministic_and_bounded():
    a, b = shape_corpus(5, 4), shape_corpus(5, 4)
    assert a == b
    for spec in a:
        g = rasterize(spec, 32)
        assert g.min() >= 0.0 and g.max() <= 1.0 and g.max() > 0.5
