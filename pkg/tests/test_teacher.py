import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdslab.diffusion import NoisySample, make_schedule
from sdslab.errors import InvalidArgument
from sdslab.experiments import teacher_compare
from sdslab.optim import Adam, AdamConfig
from sdslab.shapes import N_CLASSES, projection_pairs, shape_corpus
from sdslab.teacher import (
    Condition,
    DenoiserModel,
    GaussianMixture,
    Guided,
    TeacherTrainConfig,
    TrainBatch,
    batch_loss_and_grad,
    cfg_combine,
    denoising_loss,
    gmm_eps,
    gmm_score,
    init_model,
    mlp_forward,
    mlp_input_grad,
    train_step,
    train_teacher,
)


def point_schedule(alpha, sigma):
    base = make_schedule(2)
    return type(base)(2, np.array([1.0, alpha, alpha]), np.array([0.0, sigma, sigma]), "custom")


def single_gaussian(dim=1, mu=0.0, std=1.0):
    return GaussianMixture(np.array([1.0]), np.full((1, dim), mu), np.array([std]))


# --- oracle --------------------------------------------------------------


def test_gmm_score_single_gaussian_example():
    s = point_schedule(0.8, 0.6)
    g = single_gaussian()
    assert gmm_score(g, np.array([1.0]), 1, s)[0] == pytest.approx(-1.0, abs=1e-12)
    assert gmm_eps(g, NoisySample(np.array([1.0]), 1), s)[0] == pytest.approx(0.6, abs=1e-12)
    # E[eps | x_t] computed from the posterior mean of x0
    assert (1 - 0.8 * 0.8) / 0.6 == pytest.approx(0.6)


def test_gmm_score_zero_at_mode_and_symmetry(sched):
    g = GaussianMixture(np.array([1.0]), np.array([[0.5, -0.3]]), np.array([0.2]))
    assert np.allclose(gmm_score(g, sched.alpha[300] * g.means[0], 300, sched), 0.0, atol=1e-12)
    sym = GaussianMixture(np.array([0.5, 0.5]), np.array([[1.0, 2.0], [-1.0, -2.0]]), np.array([0.3, 0.3]))
    assert np.allclose(gmm_score(sym, np.zeros(2), 500, sched), 0.0, atol=1e-12)


def test_gmm_eps_far_tail_at_T(sched):
    g = single_gaussian(dim=3, std=0.5)
    x = np.array([40.0, -30.0, 10.0])
    eps = gmm_eps(g, NoisySample(x, sched.T), sched)
    var = sched.alpha[-1] ** 2 * 0.25 + sched.sigma[-1] ** 2
    assert np.allclose(eps, x * sched.sigma[-1] / var, rtol=1e-12)


def test_gmm_shape_mismatch(sched):
    with pytest.raises(InvalidArgument):
        gmm_score(single_gaussian(dim=2), np.zeros(3), 10, sched)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 1000), st.floats(-5, 5), st.floats(0.1, 3.0))
def test_single_gaussian_score_is_linear(t, x, std):
    sched = make_schedule(1000)
    g = single_gaussian(std=std)
    slope = -1.0 / (sched.alpha[t] ** 2 * std**2 + sched.sigma[t] ** 2)
    assert gmm_score(g, np.array([x]), t, sched)[0] == pytest.approx(slope * x, rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**31))
def test_eps_is_minus_sigma_score(t, seed):
    sched = make_schedule(1000)
    r = np.random.default_rng(seed)
    g = GaussianMixture(np.array([0.3, 0.7]), r.standard_normal((2, 4)), np.array([0.2, 0.5]))
    x = r.standard_normal(4) * 3
    assert np.max(np.abs(gmm_eps(g, NoisySample(x, t), sched) + sched.sigma[t] * gmm_score(g, x, t, sched))) <= 1e-12


def test_mixture_invariants():
    with pytest.raises(InvalidArgument):
        GaussianMixture(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones(2))
    with pytest.raises(InvalidArgument):
        GaussianMixture(np.array([1.0]), np.zeros((1, 1)), np.array([0.0]))


# --- conditions and network ---------------------------------------------


def test_condition_invariants():
    assert Condition.view(-0.5).angle == pytest.approx(2 * math.pi - 0.5)
    with pytest.raises(InvalidArgument):
        Condition("view")
    with pytest.raises(InvalidArgument):
        Condition("class", angle=1.0, class_id=0)


def test_feature_layout():
    m = init_model(8, "class", n_classes=3, hidden=(5,))
    assert m.widths == (8 + 16 + 3, 5, 8)
    assert m.n_params == 27 * 5 + 5 + 5 * 8 + 8
    assert np.array_equal(m.cond_features(Condition.label(2)), [0, 0, 1])
    v = init_model(8, "view", hidden=(5,))
    assert np.allclose(v.cond_features(Condition.view(math.pi / 2)), [1.0, 0.0])
    with pytest.raises(InvalidArgument):
        v.cond_features(Condition.label(0))
    with pytest.raises(InvalidArgument):
        DenoiserModel((10, 8), np.zeros(88))


def test_zero_params_give_zero_output():
    m = init_model(8, "view", hidden=(6, 6))
    m.params[:] = 0.0
    assert np.array_equal(mlp_forward(m, np.ones(8), 100, Condition.view(1.0)), np.zeros(8))


def test_forward_deterministic():
    a = init_model(8, "view", hidden=(6,), rng=np.random.default_rng(3))
    b = init_model(8, "view", hidden=(6,), rng=np.random.default_rng(3))
    x = np.linspace(-1, 1, 8)
    assert np.array_equal(mlp_forward(a, x, 10, Condition.view(0.3)), mlp_forward(b, x, 10, Condition.view(0.3)))


def test_forward_layout_mismatch():
    m = init_model(8, hidden=(4,))
    with pytest.raises(InvalidArgument):
        mlp_forward(m, np.zeros(9), 10)


def _randomize(m, seed=0, scale=0.3):
    m.params = np.random.default_rng(seed).standard_normal(m.n_params) * scale
    return m


def test_input_gradient_matches_central_differences():
    m = _randomize(init_model(6, "view", hidden=(10, 10)))
    x = np.random.default_rng(1).standard_normal(6)
    g_out = np.random.default_rng(2).standard_normal(6)
    cond = Condition.view(0.9)
    analytic = mlp_input_grad(m, x, 321, cond, g_out)
    h = 1e-6
    numeric = np.array(
        [
            (g_out @ mlp_forward(m, x + h * e, 321, cond) - g_out @ mlp_forward(m, x - h * e, 321, cond)) / (2 * h)
            for e in np.eye(6)
        ]
    )
    assert np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric)) < 1e-4


def _batch(m, n=4, seed=0):
    r = np.random.default_rng(seed)
    feats = m.cond_features([Condition.label(int(c)) for c in r.integers(0, m.n_classes, n)])
    return TrainBatch(r.standard_normal((n, m.R)), r.integers(1, 1001, n), r.standard_normal((n, m.R)), feats)


def test_parameter_gradient_matches_central_differences(sched):
    m = _randomize(init_model(5, "class", n_classes=3, hidden=(7, 7)))
    batch = _batch(m, n=1)
    _, g = batch_loss_and_grad(m, batch, sched)
    idx = np.random.default_rng(4).choice(m.n_params, 25, replace=False)
    h = 1e-6
    worst = 0.0
    for i in idx:
        p_plus, p_minus = m.params.copy(), m.params.copy()
        p_plus[i] += h
        p_minus[i] -= h
        num = (batch_loss_and_grad(m, batch, sched, p_plus)[0] - batch_loss_and_grad(m, batch, sched, p_minus)[0]) / (2 * h)
        worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-8))
    assert worst < 1e-4


def test_exact_model_has_zero_loss(sched):
    # a zero network predicting zero noise is exact for a zero-noise batch
    m = init_model(4, hidden=(3,))
    m.params[:] = 0.0
    batch = TrainBatch(np.ones((2, 4)), np.array([5, 9]), np.zeros((2, 4)), np.zeros((2, 0)))
    opt = Adam(AdamConfig(weight_decay=0.0))
    before = m.params.copy()
    assert train_step(m, batch, sched, opt) == 0.0
    assert np.array_equal(m.params, before)


def test_overfit_one_batch(sched):
    m = init_model(16, "view", hidden=(64, 64), rng=np.random.default_rng(0))
    r = np.random.default_rng(1)
    batch = TrainBatch(
        r.standard_normal((8, 16)), r.integers(1, 1001, 8), r.standard_normal((8, 16)), m.cond_features([Condition.view(a) for a in r.uniform(0, 6, 8)])
    )
    opt = Adam(AdamConfig(lr=3e-3))
    losses = [train_step(m, batch, sched, opt) for _ in range(200)]
    assert losses[-1] <= 0.5 * losses[0]


def test_cfg_combine_examples():
    assert cfg_combine([0.1], [0.3], 5)[0] == pytest.approx(1.1)
    assert cfg_combine([0.1], [0.3], 0)[0] == pytest.approx(0.1)
    assert cfg_combine([0.1], [0.3], 1)[0] == pytest.approx(0.3)
    with pytest.raises(InvalidArgument):
        cfg_combine([0.1], [0.3, 0.2], 1)


def test_guided_short_circuits():
    seen = []

    def teacher(x, t, c):
        seen.append(c.kind if c else None)
        return np.full(2, 1.0 if c and c.kind != "none" else 0.0)

    g = Guided(teacher, 3.0)
    assert np.allclose(g(np.zeros(2), 5, Condition.view(0.1)), 3.0)
    assert seen == ["view", "none"]
    seen.clear()
    assert np.allclose(Guided(teacher, 1.0)(np.zeros(2), 5, Condition.view(0.1)), 1.0)
    assert seen == ["view"]


def test_train_teacher_rejects_empty():
    with pytest.raises(InvalidArgument):
        train_teacher([], "view", TeacherTrainConfig(max_steps=1))


def test_full_condition_dropout_makes_condition_irrelevant():
    pairs = projection_pairs(shape_corpus(3, 10), "view", 4, np.random.default_rng(0))
    m = train_teacher(pairs, "view", TeacherTrainConfig(hidden=(16,), max_steps=50, cond_dropout=1.0))
    x = np.random.default_rng(5).standard_normal((6, m.R))
    for a in (0.0, 1.0, 4.0):
        assert np.array_equal(mlp_forward(m, x, 400, Condition.view(a)), mlp_forward(m, x, 400, None))


def test_training_is_deterministic():
    pairs = projection_pairs(shape_corpus(3, 5), "class", 2, np.random.default_rng(0))
    cfg = TeacherTrainConfig(hidden=(8,), max_steps=20)
    a = train_teacher(pairs, "class", cfg, n_classes=N_CLASSES)
    b = train_teacher(pairs, "class", cfg, n_classes=N_CLASSES)
    assert np.array_equal(a.params, b.params)


@pytest.mark.slow
def test_trained_teachers_beat_untrained_by_5x(trained_teachers, sched):
    held = shape_corpus(4242, 30)
    for model, kind in zip(trained_teachers, ("view", "class")):
        pairs = projection_pairs(held, kind, 4, np.random.default_rng(0))
        X = np.stack([p[0] for p in pairs])
        conds = [p[1] for p in pairs]
        fresh = init_model(model.R, kind, model.n_classes)
        trained = denoising_loss(model, X, conds, 500, sched, np.random.default_rng(1))
        untrained = denoising_loss(fresh, X, conds, 500, sched, np.random.default_rng(1))
        assert trained < 0.5
        assert untrained >= 5 * trained


@pytest.mark.slow
def test_view_teacher_maskiou_at_800(trained_teachers, sched):
    view, fine = trained_teachers
    rows = teacher_compare(view, fine, shape_corpus(4243, 20), sched, np.random.default_rng(0), t_list=(800,))
    assert rows[0].iou_view > 0.5
