"""Teacher score models.

Two kinds of teacher live here. ``GaussianMixture`` gives the exact noisy
score of an analytic data distribution, used as a ground-truth oracle. The
``DenoiserModel`` is a small fully connected eps-prediction network over 1D
projections, trained with denoising score matching and conditioned either on
the view angle or on a class label. Both are callables ``teacher(x, t, cond)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .diffusion import NoiseSchedule, NoisySample, eps_to_x0, make_schedule
from .errors import InvalidArgument, TrainingDivergence
from .optim import Adam, AdamConfig

logger = logging.getLogger(__name__)

COND_KINDS = ("view", "class", "none")


@dataclass(frozen=True)
class Condition:
    kind: str = "none"
    angle: float | None = None
    class_id: int | None = None

    def __post_init__(self):
        if self.kind not in COND_KINDS:
            raise InvalidArgument(f"unknown condition kind {self.kind!r}")
        if (self.kind == "view") != (self.angle is not None):
            raise InvalidArgument("angle must be given exactly when kind='view'")
        if (self.kind == "class") != (self.class_id is not None):
            raise InvalidArgument("class_id must be given exactly when kind='class'")
        if self.angle is not None:
            object.__setattr__(self, "angle", float(self.angle) % (2 * math.pi))

    @classmethod
    def view(cls, angle: float) -> "Condition":
        return cls("view", angle=angle)

    @classmethod
    def label(cls, class_id: int) -> "Condition":
        return cls("class", class_id=int(class_id))

    @classmethod
    def none(cls) -> "Condition":
        return cls("none")


# ---------------------------------------------------------------------------
# analytic oracle


@dataclass
class GaussianMixture:
    """Isotropic Gaussian mixture: sum_k w_k N(mu_k, std_k^2 I)."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.stds = np.broadcast_to(np.asarray(self.stds, dtype=np.float64), self.weights.shape).copy()
        if self.weights.ndim != 1 or len(self.weights) < 1:
            raise InvalidArgument("need at least one mixture component")
        if len(self.means) != len(self.weights):
            raise InvalidArgument("means and weights disagree on component count")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise InvalidArgument("weights must be nonnegative and sum to 1")
        if np.any(self.stds <= 0):
            raise InvalidArgument("component stds must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.stds[comp, None] * rng.standard_normal((n, self.dim))


def gmm_score(gmm: GaussianMixture, x, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Exact grad log p_t(x) of the mixture pushed through the forward process.

    The t-marginal has component means alpha_t mu_k and variances
    alpha_t^2 std_k^2 + sigma_t^2. Accepts a single point or a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != gmm.dim:
        raise InvalidArgument(f"point has length {x.shape[-1]}, mixture dim is {gmm.dim}")
    t = sched.check_t(t)
    a, s = sched.alpha[t], sched.sigma[t]
    var = a**2 * gmm.stds**2 + s**2  # (K,)
    diff = x[..., None, :] - a * gmm.means  # (..., K, d)
    sq = np.sum(diff**2, axis=-1)
    logp = np.log(np.maximum(gmm.weights, 1e-300)) - 0.5 * gmm.dim * np.log(2 * math.pi * var) - 0.5 * sq / var
    logp -= logp.max(axis=-1, keepdims=True)
    resp = np.exp(logp)
    resp /= resp.sum(axis=-1, keepdims=True)
    return -np.sum(resp[..., None] * diff / var[:, None], axis=-2)


def gmm_eps(gmm: GaussianMixture, x_t: NoisySample, sched: NoiseSchedule) -> np.ndarray:
    """Bayes-optimal eps prediction, -sigma_t * score."""
    return -sched.sigma[x_t.t] * gmm_score(gmm, x_t.data, x_t.t, sched)


@dataclass
class GmmTeacher:
    """Oracle teacher; ignores the condition."""

    gmm: GaussianMixture
    sched: NoiseSchedule

    def __call__(self, x, t, cond=None) -> np.ndarray:
        return gmm_eps(self.gmm, NoisySample(np.asarray(x, dtype=np.float64), int(t)), self.sched)


@dataclass
class ConditionalGmmTeacher:
    """Oracle whose mixture means depend on the condition.

    ``means_fn(cond)`` returns the (K, dim) component means for that
    condition; all components share weight and ``std``.
    """

    means_fn: Callable[[Condition], np.ndarray]
    std: float
    sched: NoiseSchedule

    def mixture(self, cond: Condition) -> GaussianMixture:
        means = np.atleast_2d(self.means_fn(cond))
        k = len(means)
        return GaussianMixture(np.full(k, 1.0 / k), means, np.full(k, self.std))

    def __call__(self, x, t, cond=None) -> np.ndarray:
        cond = cond if cond is not None else Condition.none()
        return gmm_eps(self.mixture(cond), NoisySample(np.asarray(x, dtype=np.float64), int(t)), self.sched)


# ---------------------------------------------------------------------------
# trainable denoiser


def time_embedding(t, T: int, n_freq: int = 8) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = math.pi * 2.0 ** np.arange(n_freq)
    ang = t[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserModel:
    """MLP eps_phi(x_t; t, y) over length-R projections.

    Input layout is concat(x_t[R], time features[2 * n_freq], condition
    features[cond_dim]); hidden layers use tanh; the output has length R.
    ``params`` is one flat float64 vector; weights are stored (fan_in,
    fan_out) row-major, each followed by its bias.
    """

    widths: tuple[int, ...]
    params: np.ndarray
    cond_kind: str = "none"
    n_classes: int = 0
    T: int = 1000
    n_freq: int = 8

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.cond_kind not in COND_KINDS:
            raise InvalidArgument(f"unknown condition kind {self.cond_kind!r}")
        if self.widths[0] != self.R + 2 * self.n_freq + self.cond_dim:
            raise InvalidArgument(
                f"input width {self.widths[0]} does not match R={self.R} + time {2 * self.n_freq} + cond {self.cond_dim}"
            )
        if self.params.shape != (self.n_params,):
            raise InvalidArgument(f"expected {self.n_params} parameters, got {self.params.shape}")

    @property
    def R(self) -> int:
        return self.widths[-1]

    @property
    def cond_dim(self) -> int:
        return {"view": 2, "class": self.n_classes, "none": 0}[self.cond_kind]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        p = self.params if params is None else params
        out, off = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            W = p[off : off + a * b].reshape(a, b)
            off += a * b
            out.append((W, p[off : off + b]))
            off += b
        return out

    def cond_features(self, cond) -> np.ndarray:
        """Features for one Condition, or a list of them (rows)."""
        if isinstance(cond, (list, tuple)):
            return np.stack([self.cond_features(c) for c in cond]) if cond else np.zeros((0, self.cond_dim))
        cond = cond if cond is not None else Condition.none()
        feat = np.zeros(self.cond_dim)
        if cond.kind == "none":
            return feat
        if cond.kind != self.cond_kind:
            raise InvalidArgument(f"model conditions on {self.cond_kind!r}, got {cond.kind!r}")
        if cond.kind == "view":
            feat[:] = (math.sin(cond.angle), math.cos(cond.angle))
        else:
            if not 0 <= cond.class_id < self.n_classes:
                raise InvalidArgument(f"class id {cond.class_id} outside [0, {self.n_classes})")
            feat[cond.class_id] = 1.0
        return feat

    def __call__(self, x, t, cond=None) -> np.ndarray:
        return mlp_forward(self, x, t, cond)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.widths, self.params.copy(), self.cond_kind, self.n_classes, self.T, self.n_freq)


def init_model(
    R: int,
    cond_kind: str = "none",
    n_classes: int = 0,
    hidden: Sequence[int] = (256, 256, 256),
    T: int = 1000,
    n_freq: int = 8,
    rng: np.random.Generator | None = None,
) -> DenoiserModel:
    """Glorot-normal weights, zero biases, zero weights on condition inputs.

    Zeroed condition weights mean a network trained with the condition always
    dropped answers conditional and unconditional queries identically.
    Values are rounded to float32 so checkpoints round-trip exactly.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    cond_dim = {"view": 2, "class": n_classes, "none": 0}[cond_kind]
    widths = (R + 2 * n_freq + cond_dim, *hidden, R)
    chunks = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        W = rng.standard_normal((a, b)) * math.sqrt(2.0 / (a + b))
        if i == 0 and cond_dim:
            W[a - cond_dim :] = 0.0
        chunks += [W.ravel(), np.zeros(b)]
    params = np.concatenate(chunks).astype(np.float32).astype(np.float64)
    return DenoiserModel(widths, params, cond_kind, n_classes, T, n_freq)


def _inputs(model: DenoiserModel, x, t, cond_feats) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != model.R:
        raise InvalidArgument(f"model expects projections of length {model.R}, got {x2.shape[1]}")
    n = x2.shape[0]
    temb = time_embedding(t, model.T, model.n_freq)
    if temb.shape[0] == 1 and n > 1:
        temb = np.repeat(temb, n, axis=0)
    cf = np.asarray(cond_feats, dtype=np.float64).reshape(-1, model.cond_dim) if model.cond_dim else np.zeros((n, 0))
    if cf.shape[0] == 1 and n > 1:
        cf = np.repeat(cf, n, axis=0)
    if temb.shape[0] != n or cf.shape[0] != n:
        raise InvalidArgument("batch sizes of x, t and condition disagree")
    return np.concatenate([x2, temb, cf], axis=1), single


def _forward(model: DenoiserModel, h: np.ndarray, params=None):
    layers = model.layers(params)
    acts = [h]
    for i, (W, b) in enumerate(layers):
        z = acts[-1] @ W + b
        acts.append(np.tanh(z) if i < len(layers) - 1 else z)
    return acts


def _backward(model: DenoiserModel, acts, g_out: np.ndarray, params=None):
    """Returns (flat parameter gradient, gradient w.r.t. the network input)."""
    layers = model.layers(params)
    grads = []
    g = g_out
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append((acts[i].T @ g, g.sum(axis=0)))
        g = g @ W.T
        if i > 0:
            g = g * (1.0 - acts[i] ** 2)
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in reversed(grads)])
    return flat, g


def mlp_forward(model: DenoiserModel, x_t, t, cond=None) -> np.ndarray:
    """eps_phi(x_t; t, cond) for one projection or a batch (rows)."""
    h, single = _inputs(model, x_t, t, model.cond_features(cond))
    out = _forward(model, h)[-1]
    return out[0] if single else out


def mlp_input_grad(model: DenoiserModel, x_t, t, cond, g_out) -> np.ndarray:
    """Vector-Jacobian product of the output w.r.t. the noisy input."""
    h, single = _inputs(model, x_t, t, model.cond_features(cond))
    acts = _forward(model, h)
    _, g_in = _backward(model, acts, np.atleast_2d(np.asarray(g_out, dtype=np.float64)))
    g_x = g_in[:, : model.R]
    return g_x[0] if single else g_x


@dataclass
class TrainBatch:
    x0: np.ndarray  # (n, R)
    t: np.ndarray  # (n,)
    noise: np.ndarray  # (n, R)
    cond_feats: np.ndarray  # (n, cond_dim)


def batch_loss_and_grad(model: DenoiserModel, batch: TrainBatch, sched: NoiseSchedule, params=None):
    """Mean squared eps error over all entries and its parameter gradient."""
    if len(batch.x0) == 0:
        raise InvalidArgument("empty batch")
    t = np.asarray(batch.t, dtype=int)
    x_t = sched.alpha[t, None] * batch.x0 + sched.sigma[t, None] * batch.noise
    h, _ = _inputs(model, x_t, t, batch.cond_feats)
    acts = _forward(model, h, params)
    resid = acts[-1] - batch.noise
    loss = float(np.mean(resid**2))
    g, _ = _backward(model, acts, 2.0 * resid / resid.size, params)
    return loss, g


def train_step(model: DenoiserModel, batch: TrainBatch, sched: NoiseSchedule, opt: Adam) -> float:
    """One denoising score-matching update; mutates ``model.params``."""
    loss, g = batch_loss_and_grad(model, batch, sched)
    if not math.isfinite(loss):
        raise TrainingDivergence("non-finite denoising loss", step=opt.state.step if opt.state else 0)
    model.params = opt.step(model.params, g)
    return loss


@dataclass
class TeacherTrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 2e-5
    cond_dropout: float = 0.1
    hidden: tuple[int, ...] = (256, 256, 256)
    T: int = 1000
    schedule: str = "cosine"
    seed: int = 0
    max_steps: int | None = None
    lr_floor: float = 0.1  # final lr as a fraction of lr (cosine decay)


def _stack_dataset(dataset: Iterable, cond_kind: str):
    xs, conds = [], []
    for proj, cond in dataset:
        xs.append(np.asarray(proj, dtype=np.float64))
        conds.append(cond if cond is not None else Condition.none())
    if not xs:
        raise InvalidArgument("teacher dataset is empty")
    X = np.stack(xs)
    if cond_kind == "class":
        n_classes = 1 + max((c.class_id for c in conds if c.kind == "class"), default=0)
    else:
        n_classes = 0
    return X, conds, n_classes


def train_teacher(
    dataset: Iterable,
    cond_kind: str,
    cfg: TeacherTrainConfig | None = None,
    n_classes: int | None = None,
) -> DenoiserModel:
    """Fit an eps-prediction network to ``(projection, Condition)`` pairs.

    Time steps are drawn uniformly from 1..T; each example's condition is
    replaced by the null condition with probability ``cfg.cond_dropout`` so
    the same network serves classifier-free guidance.
    """
    cfg = cfg or TeacherTrainConfig()
    X, conds, found_classes = _stack_dataset(dataset, cond_kind)
    n_classes = n_classes if n_classes is not None else found_classes
    sched = make_schedule(cfg.T, cfg.schedule)
    root = np.random.SeedSequence(cfg.seed)
    init_rng, data_rng = (np.random.default_rng(s) for s in root.spawn(2))
    model = init_model(X.shape[1], cond_kind, n_classes, cfg.hidden, cfg.T, rng=init_rng)
    feats = model.cond_features(conds)
    n = len(X)
    steps = max(1, cfg.epochs * n // cfg.batch_size)
    if cfg.max_steps is not None:
        steps = min(steps, cfg.max_steps)
    opt = Adam(AdamConfig(lr=cfg.lr, weight_decay=cfg.weight_decay))
    for it in range(steps):
        frac = it / max(1, steps - 1)
        opt.cfg.lr = cfg.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))
        idx = data_rng.integers(0, n, size=min(cfg.batch_size, n))
        cf = feats[idx].copy()
        if model.cond_dim:
            cf[data_rng.random(len(idx)) < cfg.cond_dropout] = 0.0
        batch = TrainBatch(
            X[idx],
            data_rng.integers(1, cfg.T + 1, size=len(idx)),
            data_rng.standard_normal((len(idx), X.shape[1])),
            cf,
        )
        try:
            loss = train_step(model, batch, sched, opt)
        except TrainingDivergence as exc:
            raise TrainingDivergence(f"teacher training diverged at iteration {it}", iteration=it) from exc
        if it % 1000 == 0:
            logger.debug("teacher %s step %d loss %.4f", cond_kind, it, loss)
    model.params = model.params.astype(np.float32).astype(np.float64)
    return model


def denoising_loss(model, X: np.ndarray, conds, t: int, sched: NoiseSchedule, rng: np.random.Generator) -> float:
    """Held-out eps-MSE at a single time step (fresh noise)."""
    noise = rng.standard_normal(X.shape)
    x_t = sched.alpha[t] * X + sched.sigma[t] * noise
    if isinstance(model, DenoiserModel):
        eps = mlp_forward(model, x_t, np.full(len(X), t), list(conds))
    else:
        eps = np.stack([model(x, t, c) for x, c in zip(x_t, conds)])
    return float(np.mean((eps - noise) ** 2))


def cfg_combine(eps_uncond, eps_cond, scale: float) -> np.ndarray:
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise InvalidArgument(f"shape mismatch {eps_uncond.shape} vs {eps_cond.shape}")
    if scale < 0:
        raise InvalidArgument("guidance scale must be >= 0")
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass
class Guided:
    """Classifier-free-guided view of a teacher: u + s * (c - u).

    Scale 1 short-circuits to the conditional prediction alone.
    """

    teacher: Callable
    scale: float = 1.0
    calls: int = field(default=0, compare=False)

    def __call__(self, x, t, cond=None) -> np.ndarray:
        self.calls += 1
        cond_eps = self.teacher(x, t, cond)
        if self.scale == 1.0 or cond is None or cond.kind == "none":
            return np.asarray(cond_eps, dtype=np.float64)
        return cfg_combine(self.teacher(x, t, Condition.none()), cond_eps, self.scale)


def single_step_x0(teacher, x_t: NoisySample, cond, sched: NoiseSchedule) -> np.ndarray:
    return eps_to_x0(x_t, teacher(x_t.data, x_t.t, cond), sched).data
