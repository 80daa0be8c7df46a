"""Flow matching on guided couplings: coupling losses, the learned noise encoder and the training loop.

Flow time runs from noise (t=0) to data (t=1). Two coupling sources feed the
velocity regression:

* ``revs`` pairs (x0, x1~) where x1~ is the PF-ODE image of prior noise x0
  under a trained diffusion model;
* ``forw`` pairs (x0~, x1) where x0~ is drawn from a Gaussian encoder
  q(x0~ | x1) that is kept close to the prior by a KL penalty, or for
  variant III from the closed-form forward diffusion.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .diffusion import N_TIME_FEATURES, NoiseSchedule, ScoreModel, _time_column, generate_coupling_iii, \
    generate_coupling_revs, time_embedding
from .synthdata import DatasetSpec, Rng, sample_data, sample_prior

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "I", "II", "III")
LOG_VAR_RANGE = (-10.0, 10.0)


@dataclass
class VelocityField:
    params: nc.MlpParams

    @property
    def dim(self) -> int:
        return self.params.widths[-1]

    def __call__(self, x, t, params: nc.MlpParams | None = None, dropout: float = 0.0, rng=None):
        n = nc._value(x).shape[0]
        feats = time_embedding(_time_column(t, n))
        return nc.mlp_forward(params or self.params, nc.concat_cols([x, feats]), dropout, rng)

    def bind(self, params: nc.MlpParams, dropout: float = 0.0, rng=None):
        """Callable ``u(x, t)`` evaluated with substitute (e.g. taped) parameters."""
        return lambda x, t: self(x, t, params, dropout, rng)


@dataclass
class CouplingEncoder:
    """Maps data rows to (mu, log_var) of a diagonal Gaussian over noise space."""

    params: nc.MlpParams

    @property
    def dim(self) -> int:
        return self.params.widths[-1] // 2

    def __call__(self, x1, params: nc.MlpParams | None = None):
        out = nc.mlp_forward(params or self.params, x1)
        d = self.dim
        return out[:, :d], nc.clip(out[:, d:], *LOG_VAR_RANGE)


def init_velocity(rng: Rng, d: int = 2, hidden=(128, 128, 128)) -> VelocityField:
    return VelocityField(nc.init_mlp([d + N_TIME_FEATURES, *hidden, d], rng))


def init_encoder(rng: Rng, d: int = 2, hidden=(64, 64)) -> CouplingEncoder:
    return CouplingEncoder(nc.init_mlp([d, *hidden, 2 * d], rng))


@dataclass
class CouplingBatch:
    x_from: np.ndarray  # noise side
    x_to: object  # data side; may be a tape value for encoder-built pairs
    direction: str = "revs"

    def __post_init__(self):
        if self.direction not in ("revs", "forw"):
            raise ValueError(f"direction must be 'revs' or 'forw', got {self.direction!r}")
        if nc._value(self.x_from).shape != nc._value(self.x_to).shape:
            raise nc.ShapeError(
                f"coupling sides differ: {nc._value(self.x_from).shape} vs {nc._value(self.x_to).shape}")

    def __len__(self):
        return nc._value(self.x_from).shape[0]


def interpolate(x_from, x_to, t):
    """Per-row straight path t * x_to + (1 - t) * x_from."""
    n = nc._value(x_from).shape[0]
    if nc._value(x_to).shape != nc._value(x_from).shape:
        raise nc.ShapeError(f"endpoint shapes differ: {nc._value(x_from).shape} vs {nc._value(x_to).shape}")
    tcol = _time_column(t, n)
    if np.any((tcol < 0.0) | (tcol > 1.0)):
        raise ValueError("interpolation time must lie in [0, 1]")
    return x_to * tcol + x_from * (1.0 - tcol)


def _regression_loss(u, x_from, x_to, t):
    x_t = interpolate(x_from, x_to, t)
    target = x_to - x_from
    return nc.mean_all(nc.row_sum(nc.square(u(x_t, _time_column(t, nc._value(x_from).shape[0])) - target)))


def revs_loss(u, coupling: CouplingBatch, t):
    """Velocity regression on diffusion-guided (noise -> data) pairs."""
    if coupling.direction != "revs":
        raise ValueError("revs_loss needs a 'revs' coupling batch")
    return _regression_loss(u, coupling.x_from, coupling.x_to, t)


def forw_loss(u, coupling: CouplingBatch, t):
    """Velocity regression on encoder (data -> noise) pairs."""
    if coupling.direction != "forw":
        raise ValueError("forw_loss needs a 'forw' coupling batch")
    return _regression_loss(u, coupling.x_from, coupling.x_to, t)


def baseline_cfm_loss(u, x0, x1, t):
    """Conditional flow matching with independently paired endpoints."""
    return _regression_loss(u, x0, x1, t)


def kl_gaussian(mu, log_var):
    """KL(N(mu, diag(exp(log_var))) || N(0, I)).

    Vectors give a scalar; (n, d) batches give the mean of the per-row KL.
    """
    if nc._value(mu).shape != nc._value(log_var).shape:
        raise nc.ShapeError("mu and log_var must have the same shape")
    log_var = nc.clip(log_var, *LOG_VAR_RANGE)
    terms = nc.square(mu) + nc.exp(log_var) - log_var - 1.0
    if nc._value(mu).ndim == 1:
        return 0.5 * nc.sum_all(terms)
    return 0.5 * nc.mean_all(nc.row_sum(terms))


def encode_coupling_forw(q: CouplingEncoder, x1, rng: Rng | None = None, eps=None, params=None):
    """Reparameterized draw x0~ = mu(x1) + exp(log_var / 2) * eps.

    Returns ``(x0_tilde, mu, log_var)``; all three carry gradients when
    ``params`` are tape variables.
    """
    mu, log_var = q(x1, params)
    if eps is None:
        eps = rng.normal(nc._value(mu).shape)
    return mu + nc.exp(0.5 * log_var) * eps, mu, log_var


@dataclass
class LossParts:
    total: object
    revs: object = 0.0
    forw: object = 0.0
    kl: object = 0.0

    def values(self) -> tuple[float, float, float, float]:
        return tuple(float(nc._value(v)) for v in (self.total, self.revs, self.forw, self.kl))


def straightfm_loss(u, q, revs_batch: CouplingBatch | None, forw_batch, lam: float, rng: Rng | None = None, *,
                    t_revs=None, t_forw=None, eps=None, q_params=None) -> LossParts:
    """L_revs + lam * KL + L_forw.

    ``forw_batch`` is either a ready ``CouplingBatch`` (closed-form forward
    couplings, no KL term) or an array of data rows that ``q`` encodes here
    so the encoder receives gradients. Either side may be ``None`` or empty.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    has_revs = revs_batch is not None and len(revs_batch) > 0
    has_forw = forw_batch is not None and len(nc._value(forw_batch.x_from) if isinstance(forw_batch, CouplingBatch)
                                              else nc._value(forw_batch)) > 0
    if not (has_revs or has_forw):
        raise ValueError("both coupling batches are empty")
    parts = LossParts(0.0)
    with_kl = False
    if has_revs:
        if t_revs is None:
            t_revs = rng.uniform(len(revs_batch))
        parts.revs = revs_loss(u, revs_batch, t_revs)
    if has_forw:
        if isinstance(forw_batch, CouplingBatch):
            coupling = forw_batch
        else:
            x0_tilde, mu, log_var = encode_coupling_forw(q, forw_batch, rng, eps, q_params)
            coupling = CouplingBatch(x0_tilde, np.asarray(forw_batch), "forw")
            parts.kl = kl_gaussian(mu, log_var)
            with_kl = True
        if t_forw is None:
            t_forw = rng.uniform(len(coupling))
        parts.forw = forw_loss(u, coupling, t_forw)
    total = parts.revs + parts.forw
    if with_kl and lam != 0.0:
        total = total + lam * parts.kl
    parts.total = total
    return parts


@dataclass
class TrainConfig:
    variant: str = "II"
    iterations: int = 20_000
    batch: int = 256
    lr: float = 1e-3
    lam: float | None = None
    mix_ratio: float | None = None
    ema_decay: float | None = 0.999
    seed: int = 0
    hidden: tuple = (128, 128, 128)
    encoder_hidden: tuple = (64, 64)
    dropout: float = 0.0
    coupling_steps: int = 50
    cache_size: int = 200_000
    on_the_fly: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.lam is None:
            self.lam = 10.0 if self.variant == "II" else 0.0
        if self.mix_ratio is None:
            self.mix_ratio = 0.5 if self.variant in ("II", "III") else 0.0
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.variant in ("I", "baseline") and self.mix_ratio != 0.0:
            raise ValueError(f"variant {self.variant} takes no forward couplings (mix_ratio must be 0)")
        if self.iterations < 1 or self.batch < 1:
            raise ValueError("iterations and batch must be >= 1")

    @property
    def split(self) -> tuple[int, int]:
        """Rows per batch taken from the (revs, forw) sides."""
        n_revs = math.ceil((1.0 - self.mix_ratio) * self.batch)
        return n_revs, self.batch - n_revs


def generate_coupling_cache(guide: ScoreModel, schedule: NoiseSchedule, rng: Rng, size: int, steps: int = 50,
                            chunk: int = 8192, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Pre-compute ``size`` diffusion-guided pairs.

    Noise is drawn up front in one stream, so the result does not depend on
    ``workers``; chunks are merged by index.
    """
    x0 = sample_prior(rng, size, guide.dim)
    bounds = list(range(0, size, chunk)) + [size]
    pieces = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]

    def run(piece):
        lo, hi = piece
        return generate_coupling_revs(guide, schedule, x0[lo:hi], steps)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(run, pieces))
    else:
        out = [run(p) for p in pieces]
    return x0, np.concatenate(out, axis=0)


@dataclass
class FlowResult:
    velocity: VelocityField
    encoder: CouplingEncoder | None
    log: list = field(default_factory=list)  # (iter, total, revs, forw, kl)
    updates: dict = field(default_factory=dict)


def train_straightfm(guide: ScoreModel | None, schedule: NoiseSchedule, spec: DatasetSpec,
                     config: TrainConfig, cache=None) -> FlowResult:
    """Train the velocity field (and encoder for variant II) for a fixed budget.

    ``cache`` may pass pre-computed ``(x0, x1_tilde)`` guided pairs; otherwise
    they are generated here (once, or per iteration when ``on_the_fly``).
    """
    if config.variant != "baseline" and guide is None:
        raise ValueError(f"variant {config.variant} needs a trained diffusion guide")
    rng = Rng(config.seed, stream=2)
    d = 2
    velocity = init_velocity(rng, d, config.hidden)
    encoder = init_encoder(rng, d, config.encoder_hidden) if config.variant == "II" else None
    n_revs, n_forw = config.split
    if config.variant == "baseline":
        n_revs, n_forw = config.batch, 0
    uses_guide = config.variant != "baseline" and n_revs > 0
    if uses_guide and not config.on_the_fly and cache is None:
        cache = generate_coupling_cache(guide, schedule, rng.spawn(3), config.cache_size, config.coupling_steps,
                                        workers=config.workers)

    theta = velocity.params.arrays()
    theta_opt = nc.AdamState.zeros_like(theta, lr=config.lr)
    phi = encoder.params.arrays() if encoder else []
    phi_opt = nc.AdamState.zeros_like(phi, lr=config.lr) if encoder else None
    ema = [p.copy() for p in theta] if config.ema_decay else None
    history = []
    updates = {"theta": 0, "phi": 0}

    for it in range(config.iterations):
        # step 1: endpoints and times
        if config.variant == "baseline":
            x0 = sample_prior(rng, n_revs, d)
            x1 = sample_data(rng, spec, n_revs)
        # step 2: guided couplings
        revs = None
        if uses_guide:
            if config.on_the_fly:
                x0 = sample_prior(rng, n_revs, d)
                x1_tilde = generate_coupling_revs(guide, schedule, x0, config.coupling_steps)
            else:
                idx = rng.integers(len(cache[0]), n_revs)
                x0, x1_tilde = cache[0][idx], cache[1][idx]
            revs = CouplingBatch(x0, x1_tilde, "revs")
        t_revs = rng.uniform(n_revs) if n_revs else None

        tape = nc.Tape()
        theta_t = velocity.params.on(tape)
        u = velocity.bind(theta_t, config.dropout, rng if config.dropout else None)
        phi_t = encoder.params.on(tape) if encoder else None

        if config.variant == "baseline":
            loss = baseline_cfm_loss(u, x0, x1, t_revs)
            parts = LossParts(loss, loss)
        else:
            # step 3: data-side couplings
            forw = None
            eps = t_forw = None
            if n_forw:
                x1 = sample_data(rng, spec, n_forw)
                t_forw = rng.uniform(n_forw)
                if config.variant == "III":
                    forw = CouplingBatch(generate_coupling_iii(schedule, x1, rng), x1, "forw")
                else:
                    forw = x1
                    eps = rng.normal((n_forw, d))
            # step 4: objective
            parts = straightfm_loss(u, encoder, revs, forw, config.lam, rng, t_revs=t_revs, t_forw=t_forw,
                                    eps=eps, q_params=phi_t)
        total = float(nc._value(parts.total))
        if not np.isfinite(total):
            raise nc.NumericFault(f"flow matching loss became {total} at iteration {it}")

        # step 5: joint descent
        train_phi = encoder is not None and n_forw > 0
        wrt = theta_t.arrays() + (phi_t.arrays() if train_phi else [])
        grads = tape.gradient(parts.total, wrt)
        theta, theta_opt = nc.adam_step(theta, grads[: len(theta)], theta_opt)
        updates["theta"] += 1
        if train_phi:
            phi, phi_opt = nc.adam_step(phi, grads[len(theta):], phi_opt)
            encoder = CouplingEncoder(nc.MlpParams.from_arrays(phi, encoder.params.activation))
            updates["phi"] += 1
        velocity = VelocityField(nc.MlpParams.from_arrays(theta, velocity.params.activation))
        if ema is not None:
            ema = nc.ema_update(ema, theta, config.ema_decay)
        history.append((it + 1, *parts.values()))
        if (it + 1) % 5000 == 0:
            log.info("fm[%s] iter %d loss %.4f", config.variant, it + 1, np.mean([h[1] for h in history[-1000:]]))

    if ema is not None:
        velocity = VelocityField(nc.MlpParams.from_arrays(ema, velocity.params.activation))
    return FlowResult(velocity, encoder, history, updates)


def velocity_from_arrays(arrays) -> VelocityField:
    return VelocityField(nc.MlpParams.from_arrays(arrays))


def encoder_from_arrays(arrays) -> CouplingEncoder:
    return CouplingEncoder(nc.MlpParams.from_arrays(arrays))
