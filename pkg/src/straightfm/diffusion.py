"""Variance-preserving diffusion: schedule, denoising score matching, PF-ODE couplings."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from . import odesolve
from .synthdata import DatasetSpec, Rng, sample_data, sample_prior

log = logging.getLogger(__name__)

N_TIME_FEATURES = 8


def time_embedding(t) -> np.ndarray:
    """sin/cos of 2^k * pi * t for k = 0..3, one row per entry of ``t``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = np.pi * 2.0 ** np.arange(4)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _time_column(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full((n, 1), float(t))
    return t.reshape(n, 1)


@dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-3

    def __post_init__(self):
        if self.beta_min <= 0 or self.beta_max < self.beta_min:
            raise ValueError("need 0 < beta_min <= beta_max")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError("t_min must lie in (0, 1)")

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def log_alpha_bar(self, t):
        return -self.beta_min * t - 0.5 * (self.beta_max - self.beta_min) * t * t

    def alpha_bar(self, t):
        return np.exp(self.log_alpha_bar(t))

    def noise_std(self, t):
        # sqrt(1 - alpha_bar) without cancellation for small t
        return np.sqrt(-np.expm1(self.log_alpha_bar(t)))


@dataclass
class ScoreModel:
    """Noise predictor eps(x, t); the score is -eps / sqrt(1 - alpha_bar(t))."""

    params: nc.MlpParams

    @property
    def dim(self) -> int:
        return self.params.widths[-1]

    def predict(self, x, t, params: nc.MlpParams | None = None):
        n = nc._value(x).shape[0]
        feats = time_embedding(_time_column(t, n))
        return nc.mlp_forward(params or self.params, nc.concat_cols([x, feats]))

    __call__ = predict


def init_score_model(rng: Rng, d: int = 2, hidden=(128, 128, 128)) -> ScoreModel:
    return ScoreModel(nc.init_mlp([d + N_TIME_FEATURES, *hidden, d], rng))


def forward_perturb(schedule: NoiseSchedule, x1: np.ndarray, t, rng: Rng | None = None, eps=None):
    """Draw x_t ~ N(sqrt(abar) x1, (1 - abar) I). Returns ``(x_t, eps)``."""
    x1 = np.asarray(x1, dtype=np.float64)
    tcol = _time_column(t, x1.shape[0])
    if np.any((tcol < 0.0) | (tcol > 1.0)):
        raise ValueError("diffusion time must lie in [0, 1]")
    if eps is None:
        eps = rng.normal(x1.shape)
    mean_coef = np.sqrt(schedule.alpha_bar(tcol))
    return mean_coef * x1 + schedule.noise_std(tcol) * eps, eps


def dsm_objective(model: ScoreModel, schedule: NoiseSchedule, x1, t, eps, params=None):
    """Mean over rows of ||eps_pred(x_t, t) - eps||^2 for given t and eps."""
    x_t, _ = forward_perturb(schedule, x1, t, eps=eps)
    pred = model.predict(x_t, t, params)
    return nc.mean_all(nc.row_sum(nc.square(pred - eps)))


def dsm_loss(model: ScoreModel, schedule: NoiseSchedule, x1: np.ndarray, rng: Rng) -> float:
    n, d = np.shape(x1)
    if model.dim != d:
        raise nc.ShapeError(f"model predicts {model.dim} dims, data has {d}")
    t = schedule.t_min + (1.0 - schedule.t_min) * rng.uniform(n)
    eps = rng.normal((n, d))
    return float(dsm_objective(model, schedule, x1, t, eps))


def pf_ode_drift(model, schedule: NoiseSchedule, x: np.ndarray, t: float) -> np.ndarray:
    """Probability-flow drift -beta/2 * x + beta/2 * eps(x, t) / sqrt(1 - abar(t)).

    ``model`` is anything callable as ``model(x, t)`` returning predicted noise.
    Times below ``schedule.t_min`` are clamped up to it.
    """
    t = max(float(t), schedule.t_min)
    beta = schedule.beta(t)
    return -0.5 * beta * x + 0.5 * beta * model(x, t) / schedule.noise_std(t)


def generate_coupling_revs(model, schedule: NoiseSchedule, x0: np.ndarray, steps: int = 50,
                           solver: str = "heun") -> np.ndarray:
    """Integrate the PF-ODE from t=1 down to t_min starting at ``x0``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    traj = odesolve.solve(lambda x, t: pf_ode_drift(model, schedule, x, t), x0,
                          (1.0, schedule.t_min), solver, steps)
    return traj.terminal


def generate_coupling_iii(schedule: NoiseSchedule, x1: np.ndarray, rng: Rng | None = None, eps=None) -> np.ndarray:
    """Noise end of the closed-form forward process at t = 1."""
    return forward_perturb(schedule, x1, 1.0, rng, eps)[0]


@dataclass
class DiffusionConfig:
    iterations: int = 20_000
    batch: int = 256
    lr: float = 1e-3
    seed: int = 0
    hidden: tuple = (128, 128, 128)


class TrainingDiverged(nc.NumericFault):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class DiffusionResult:
    model: ScoreModel
    losses: list = field(default_factory=list)


def train_diffusion(spec: DatasetSpec, schedule: NoiseSchedule, config: DiffusionConfig) -> DiffusionResult:
    if config.iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = Rng(config.seed, stream=1)
    model = init_score_model(rng, 2, config.hidden)
    params = model.params.arrays()
    state = nc.AdamState.zeros_like(params, lr=config.lr)
    losses = []
    for it in range(config.iterations):
        x1 = sample_data(rng, spec, config.batch)
        t = schedule.t_min + (1.0 - schedule.t_min) * rng.uniform(config.batch)
        eps = rng.normal(x1.shape)
        tape = nc.Tape()
        bound = model.params.on(tape)
        loss = dsm_objective(model, schedule, x1, t, eps, bound)
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingDiverged(f"DSM loss became {value} at iteration {it}", last_good=model)
        grads = tape.gradient(loss, bound.arrays())
        params, state = nc.adam_step(params, grads, state)
        model = ScoreModel(nc.MlpParams.from_arrays(params, model.params.activation))
        losses.append(value)
        if (it + 1) % 5000 == 0:
            log.info("diffusion iter %d loss %.4f", it + 1, np.mean(losses[-1000:]))
    return DiffusionResult(model, losses)


def score_model_from_arrays(arrays) -> ScoreModel:
    return ScoreModel(nc.MlpParams.from_arrays(arrays))
