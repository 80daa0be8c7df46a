"""Scripted end-to-end checks of the method's claims at toy scale.

Each experiment returns a list of :class:`Check` records. The expensive ones
share a single :func:`run_pipeline` result (diffusion guide, baseline CFM and
variant-II models trained on eight_gaussians with matched budgets).
"""

from __future__ import annotations

import csv
import functools
import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .diffusion import (DiffusionConfig, NoiseSchedule, ScoreModel, dsm_objective, generate_coupling_iii,
                        generate_coupling_revs, init_score_model, pf_ode_drift, train_diffusion)
from .evalmetrics import coupling_similarity, hungarian, straightness, transport_cost, wasserstein2_blocked
from .flowmatch import (CouplingBatch, FlowResult, TrainConfig, forw_loss, generate_coupling_cache, init_encoder,
                        init_velocity, kl_gaussian, revs_loss, straightfm_loss, train_straightfm)
from .odesolve import euler, heun, rk45
from .synthdata import DatasetSpec, Rng, sample_data, sample_prior

log = logging.getLogger(__name__)

GRAD_TOL = 1e-3
FD_STEP = 1e-4


@dataclass
class Check:
    criterion: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.criterion}: {self.detail}"


# criterion 1 -----------------------------------------------------------------


def _small_instance(rng: Rng, n: int = 3):
    """Tiny random networks and fixed noise so every loss is a deterministic function."""
    score = init_score_model(rng, 2, (5,))
    velocity = init_velocity(rng, 2, (5,))
    encoder = init_encoder(rng, 2, (4,))
    # nonzero biases so their gradients are exercised too
    for p in (score.params, velocity.params, encoder.params):
        p.biases = [0.3 * rng.normal(b.shape) for b in p.biases]
    return {
        "score": score,
        "velocity": velocity,
        "encoder": encoder,
        "x1": rng.normal((n, 2)) * 2.0,
        "x0": rng.normal((n, 2)),
        "t": 0.05 + 0.9 * rng.uniform(n),
        "t2": 0.05 + 0.9 * rng.uniform(n),
        "eps": rng.normal((n, 2)),
        "mu": rng.normal((4,)),
        "log_var": rng.normal((4,)),
    }


def _check_fd(fn, arrays) -> float:
    """Worst relative error between tape gradients and central differences of ``fn``."""
    tape = nc.Tape()
    leaves = [tape.var(a) for a in arrays]
    analytic = tape.gradient(fn(leaves), leaves)
    numeric = nc.finite_difference_grad(lambda arrs: float(nc._value(fn(arrs))), arrays, FD_STEP)
    return nc.gradient_mismatch(analytic, numeric)


def gradient_errors(inst) -> dict[str, float]:
    schedule = NoiseSchedule()
    score, vel, enc = inst["score"], inst["velocity"], inst["encoder"]
    n_psi = len(score.params.arrays())
    n_theta = len(vel.params.arrays())
    x1_tilde = inst["x1"] + 0.1 * inst["eps"]

    def params(arrs, model, lo, hi):
        return nc.MlpParams.from_arrays(arrs[lo:hi], model.params.activation)

    def dsm(arrs):
        return dsm_objective(score, schedule, inst["x1"], inst["t"], inst["eps"], params(arrs, score, 0, n_psi))

    def revs(arrs):
        u = vel.bind(params(arrs, vel, 0, n_theta))
        return revs_loss(u, CouplingBatch(inst["x0"], x1_tilde, "revs"), inst["t"])

    def forw(arrs):
        u = vel.bind(params(arrs, vel, 0, n_theta))
        return forw_loss(u, CouplingBatch(inst["x0"], inst["x1"], "forw"), inst["t2"])

    def kl(arrs):
        return kl_gaussian(arrs[0], arrs[1])

    def combined(arrs):
        u = vel.bind(params(arrs, vel, 0, n_theta))
        phi = params(arrs, enc, n_theta, len(arrs))
        parts = straightfm_loss(u, enc, CouplingBatch(inst["x0"], x1_tilde, "revs"), inst["x1"], 10.0,
                                t_revs=inst["t"], t_forw=inst["t2"], eps=inst["eps"], q_params=phi)
        return parts.total

    theta = vel.params.arrays()
    return {
        "dsm": _check_fd(dsm, score.params.arrays()),
        "revs": _check_fd(revs, theta),
        "forw": _check_fd(forw, theta),
        "kl": _check_fd(kl, [inst["mu"], inst["log_var"]]),
        "combined": _check_fd(combined, theta + enc.params.arrays()),
    }


def gradient_fidelity(seed: int = 0, instances: int = 20) -> list[Check]:
    start = time.perf_counter()
    worst: dict[str, float] = {}
    rng = Rng(seed, stream=100)
    for _ in range(instances):
        for name, err in gradient_errors(_small_instance(rng)).items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    checks = [Check(f"gradient {name}", err < GRAD_TOL, f"max rel err {err:.2e} over {instances} instances (< {GRAD_TOL})")
              for name, err in worst.items()]
    checks.append(Check("gradient runtime", elapsed < 10.0, f"{elapsed:.2f} s (< 10 s)"))
    return checks


# criterion 2 -----------------------------------------------------------------


def closed_form() -> list[Check]:
    checks = []
    cases = [
        ("kl(0, 0)", kl_gaussian(np.zeros(2), np.zeros(2)), 0.0),
        ("kl(mu=(1,0), logvar=0)", kl_gaussian(np.array([1.0, 0.0]), np.zeros(2)), 0.5),
        ("kl(mu=0, logvar=1)", kl_gaussian(np.zeros(1), np.ones(1)), 0.5 * (math.e - 2.0)),
    ]
    for name, got, want in cases:
        checks.append(Check(name, abs(float(got) - want) <= 1e-12, f"{float(got):.15g} vs {want:.15g} (tol 1e-12)"))
    grow = lambda x, t: x  # noqa: E731
    e_got = float(euler(grow, np.ones((1, 1)), (0.0, 1.0), 100).terminal[0, 0])
    e_want = 1.01**100
    checks.append(Check("euler N=100 on x'=x", abs(e_got - e_want) <= 1e-12, f"{e_got:.15g} vs {e_want:.15g}"))
    traj = rk45(grow, np.ones((1, 1)), (0.0, 1.0), 1e-5, 1e-5)
    r_got = float(traj.terminal[0, 0])
    checks.append(Check("rk45 tol 1e-5 on x'=x", abs(r_got - math.e) <= 1e-4,
                        f"{r_got:.10f} vs e, err {abs(r_got - math.e):.2e} ({traj.accepted} steps)"))
    return checks


# criterion 3 -----------------------------------------------------------------


def convergence_slope(solver, grid=(10, 20, 40, 80, 160)) -> float:
    errs = [abs(float(solver(lambda x, t: x, np.ones((1, 1)), (0.0, 1.0), n).terminal[0, 0]) - math.e) for n in grid]
    slope = np.polyfit(np.log(grid), np.log(errs), 1)[0]
    return float(-slope)


def solver_orders() -> list[Check]:
    p_euler = convergence_slope(euler)
    p_heun = convergence_slope(heun)
    return [
        Check("euler order", abs(p_euler - 1.0) <= 0.1, f"observed slope {p_euler:.4f} (1.0 +/- 0.1)"),
        Check("heun order", abs(p_heun - 2.0) <= 0.1, f"observed slope {p_heun:.4f} (2.0 +/- 0.1)"),
    ]


# criterion 4 -----------------------------------------------------------------


def brute_force_w2(a: np.ndarray, b: np.ndarray) -> float:
    n = len(a)
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    return math.sqrt(best / n)


def w2_oracle(seed: int = 0, instances: int = 50) -> list[Check]:
    rng = Rng(seed, stream=101)
    worst = 0.0
    for k in range(instances):
        n = 1 + k % 7
        a, b = rng.normal((n, 2)), 2.0 * rng.normal((n, 2)) + 0.5
        cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        col = hungarian(cost)
        fast = math.sqrt(cost[np.arange(n), col].mean())
        worst = max(worst, abs(fast - brute_force_w2(a, b)))
    return [Check("hungarian W2 == exhaustive W2", worst <= 1e-9, f"max |diff| {worst:.2e} over {instances} instances")]


# criteria 5-8 ----------------------------------------------------------------


@dataclass
class PipelineRun:
    spec: DatasetSpec
    schedule: NoiseSchedule
    guide: ScoreModel
    guide_losses: list
    baseline: FlowResult
    straight: FlowResult
    seed: int
    seconds: dict = field(default_factory=dict)


@functools.lru_cache(maxsize=2)
def run_pipeline(iters: int = 20_000, batch: int = 256, seed: int = 0, cache_size: int = 200_000) -> PipelineRun:
    """Train the guide, then baseline CFM and variant II with the same budget."""
    spec = DatasetSpec("eight_gaussians")
    schedule = NoiseSchedule()
    seconds = {}
    t0 = time.perf_counter()
    guide = train_diffusion(spec, schedule, DiffusionConfig(iterations=iters, batch=batch, seed=seed))
    seconds["diffusion"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    baseline = train_straightfm(None, schedule, spec, TrainConfig("baseline", iters, batch, seed=seed))
    seconds["baseline"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    straight = train_straightfm(guide.model, schedule, spec,
                                TrainConfig("II", iters, batch, seed=seed, cache_size=cache_size))
    seconds["straightfm"] = time.perf_counter() - t0
    log.info("pipeline timings: %s", seconds)
    return PipelineRun(spec, schedule, guide.model, guide.losses, baseline, straight, seed, seconds)


def _noise(run: PipelineRun, n: int, stream: int) -> np.ndarray:
    return sample_prior(Rng(run.seed + 1000, stream), n, 2)


def straightness_ordering(run: PipelineRun, n: int = 1000) -> list[Check]:
    z = _noise(run, n, 1)
    s_base = straightness(euler(run.baseline.velocity, z, (0.0, 1.0), 100))
    s_fm = straightness(euler(run.straight.velocity, z, (0.0, 1.0), 100))
    total = sum(run.seconds.values())
    return [
        Check("straightness ordering", s_fm <= 0.7 * s_base,
              f"S(StraightFM-II)={s_fm:.4f}, S(baseline)={s_base:.4f}, reduction {1 - s_fm / s_base:.1%} (>= 30%)"),
        Check("pipeline runtime", total <= 1800.0, f"{total:.0f} s training incl. diffusion pre-pass (<= 1800 s)"),
    ]


def w2_by_steps(velocity, z, data, steps=(1, 3, 100)) -> dict[int, float]:
    return {n: wasserstein2_blocked(euler(velocity, z, (0.0, 1.0), n).terminal, data) for n in steps}


def few_step_quality(run: PipelineRun, blocks: int = 12) -> list[Check]:
    n = 512 * blocks
    z = _noise(run, n, 2)
    data = sample_data(Rng(run.seed + 2000, 1), run.spec, n)
    w_base = w2_by_steps(run.baseline.velocity, z, data)
    w_fm = w2_by_steps(run.straight.velocity, z, data)
    checks = [
        Check(f"W2 at N={k}", w_fm[k] < w_base[k], f"StraightFM-II {w_fm[k]:.4f} < baseline {w_base[k]:.4f}")
        for k in (1, 3)
    ]
    checks.append(Check("step insensitivity", w_fm[3] <= 1.2 * w_fm[100],
                        f"W2(N=3)={w_fm[3]:.4f} vs 1.2 x W2(N=100)={1.2 * w_fm[100]:.4f}"))
    return checks


def pf_ode_map(run: PipelineRun):
    drift = lambda x, t: pf_ode_drift(run.guide, run.schedule, x, t)  # noqa: E731
    return lambda z: rk45(drift, z, (1.0, run.schedule.t_min), 1e-5, 1e-5).terminal


def flow_map(velocity):
    return lambda z: rk45(velocity, z, (0.0, 1.0), 1e-5, 1e-5).terminal


def coupling_similarity_check(run: PipelineRun, n: int = 2560) -> list[Check]:
    z = _noise(run, n, 3)
    mse, base = coupling_similarity(pf_ode_map(run), flow_map(run.straight.velocity), z, Rng(run.seed, 102))
    return [Check("coupling similarity", mse < 0.5 * base, f"mse {mse:.4f} < 0.5 x permuted {base:.4f}")]


def transport_cost_check(run: PipelineRun, n: int = 10_000) -> list[Check]:
    z = _noise(run, n, 4)
    one_step = euler(run.straight.velocity, z, (0.0, 1.0), 1).terminal
    independent = sample_data(Rng(run.seed + 2000, 2), run.spec, n)
    c_fm, c_ind = transport_cost(z, one_step), transport_cost(z, independent)
    return [Check("transport cost non-increase", c_fm <= 1.01 * c_ind,
                  f"one-step {c_fm:.4f} <= 1.01 x independent {c_ind:.4f}")]


# criterion 9 -----------------------------------------------------------------


def variant_contracts(seed: int = 0) -> list[Check]:
    rng = Rng(seed, stream=103)
    vel, enc = init_velocity(rng, 2, (16,)), init_encoder(rng, 2, (8,))
    x0, x1 = rng.normal((64, 2)), 2.0 * rng.normal((64, 2))
    t = rng.uniform(64)
    revs = CouplingBatch(x0, x1, "revs")
    cfg = TrainConfig("I")
    a = straightfm_loss(vel, enc, revs, None, cfg.lam, t_revs=t).total
    shaken = enc.params.copy()
    shaken.weights = [w + rng.normal(w.shape) for w in shaken.weights]
    b = straightfm_loss(vel, type(enc)(shaken), revs, None, cfg.lam, t_revs=t).total
    bit_equal = np.asarray(a).tobytes() == np.asarray(b).tobytes()

    schedule = NoiseSchedule()
    data = sample_data(rng, DatasetSpec("eight_gaussians"), 100_000)
    x0_tilde = generate_coupling_iii(schedule, data, rng)
    mean_err = float(np.abs(x0_tilde.mean(axis=0)).max())
    var_err = float(np.abs(x0_tilde.var(axis=0) - 1.0).max())
    return [
        Check("variant I encoder invariance", bit_equal and cfg.mix_ratio == 0.0,
              f"loss {float(a)!r} vs perturbed-encoder {float(b)!r}"),
        Check("variant III prior moments", mean_err <= 0.02 and var_err <= 0.02,
              f"max |mean| {mean_err:.4f}, max |var-1| {var_err:.4f} at n=1e5 (tol 0.02)"),
    ]


EXPERIMENTS = {
    "gradient-fidelity": lambda **kw: gradient_fidelity(kw.get("seed", 0)),
    "closed-form": lambda **kw: closed_form(),
    "solver-orders": lambda **kw: solver_orders(),
    "w2-oracle": lambda **kw: w2_oracle(kw.get("seed", 0)),
    "straightness-ordering": lambda **kw: straightness_ordering(_pipeline(kw)),
    "few-step-quality": lambda **kw: few_step_quality(_pipeline(kw)),
    "coupling-similarity": lambda **kw: coupling_similarity_check(_pipeline(kw)),
    "transport-cost": lambda **kw: transport_cost_check(_pipeline(kw)),
    "variant-contracts": lambda **kw: variant_contracts(kw.get("seed", 0)),
}


def _pipeline(kw) -> PipelineRun:
    return run_pipeline(kw.get("iters", 20_000), kw.get("batch", 256), kw.get("seed", 0))


def run_experiment(name: str, **kw) -> list[Check]:
    if name == "all":
        return [c for key in EXPERIMENTS for c in EXPERIMENTS[key](**kw)]
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; choose from all, {', '.join(EXPERIMENTS)}")
    return EXPERIMENTS[name](**kw)


def write_checks_csv(path, checks: list[Check]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["criterion", "passed", "detail"])
        for c in checks:
            w.writerow([c.criterion, int(c.passed), c.detail])
