import math

import numpy as np
import pytest
from scipy import integrate

from straightfm import numcore as nc
from straightfm.diffusion import (DiffusionConfig, NoiseSchedule, ScoreModel, TrainingDiverged, dsm_loss,
                                  dsm_objective, forward_perturb, generate_coupling_iii, generate_coupling_revs,
                                  init_score_model, pf_ode_drift, time_embedding, train_diffusion)
from straightfm.synthdata import DatasetSpec, Rng, sample_data, sample_prior

SCHED = NoiseSchedule()


def standard_normal_eps(schedule):
    """Exact noise predictor when the data distribution is N(0, I)."""
    return lambda x, t: x * schedule.noise_std(t)


class FixedPredictor:
    """Stand-in for ScoreModel with a hand-written prediction rule."""

    def __init__(self, fn, d=2):
        self.fn, self.dim = fn, d

    def predict(self, x, t, params=None):
        return self.fn(x, t)

    __call__ = predict


# schedule


def test_alpha_bar_matches_quadrature():
    for t in (0.0, 0.1, 0.5, 1.0):
        integral, _ = integrate.quad(lambda s: 0.1 + s * (20.0 - 0.1), 0.0, t)
        assert SCHED.alpha_bar(t) == pytest.approx(math.exp(-integral), rel=1e-12)
    assert SCHED.alpha_bar(0.0) == 1.0
    assert SCHED.alpha_bar(1.0) == pytest.approx(4.3e-5, rel=0.01)


def test_alpha_bar_strictly_decreasing():
    grid = np.linspace(0.0, 1.0, 1000)
    assert np.all(np.diff(SCHED.alpha_bar(grid)) < 0)
    assert np.all(SCHED.beta(grid[1:]) > 0)


def test_noise_std_small_t_is_accurate():
    t = 1e-9
    assert SCHED.noise_std(t) == pytest.approx(math.sqrt(0.1 * t), rel=1e-6)


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(beta_min=0.0)
    with pytest.raises(ValueError):
        NoiseSchedule(t_min=0.0)


def test_time_embedding_features():
    e = time_embedding(np.array([0.0, 0.25]))
    assert e.shape == (2, 8)
    assert np.allclose(e[0], [0, 0, 0, 0, 1, 1, 1, 1])
    assert e[1, 0] == pytest.approx(math.sin(math.pi / 4))


# forward process


def test_perturb_at_zero_is_identity():
    x1 = Rng(0).normal((5, 2))
    x_t, eps = forward_perturb(SCHED, x1, 0.0, Rng(1))
    assert np.array_equal(x_t, x1)
    assert eps.shape == x1.shape


def test_perturb_with_zero_noise_scales_mean():
    x1 = Rng(0).normal((5, 2))
    x_t, _ = forward_perturb(SCHED, x1, 0.4, eps=np.zeros_like(x1))
    assert np.allclose(x_t, math.sqrt(SCHED.alpha_bar(0.4)) * x1, rtol=0, atol=1e-15)


def test_perturb_returns_noise_used():
    x1 = Rng(0).normal((5, 2))
    x_t, eps = forward_perturb(SCHED, x1, 0.3, Rng(7))
    assert np.allclose(x_t, math.sqrt(SCHED.alpha_bar(0.3)) * x1 + SCHED.noise_std(0.3) * eps)


def test_perturb_at_one_is_standard_normal():
    x1 = sample_data(Rng(0), DatasetSpec("eight_gaussians"), 100_000)
    x_t, _ = forward_perturb(SCHED, x1, 1.0, Rng(1))
    assert np.all(np.abs(x_t.mean(axis=0)) <= 0.02)
    assert np.all(np.abs(x_t.var(axis=0) - 1.0) <= 0.02)


def test_perturb_marginal_for_fixed_point():
    t = 0.3
    x1 = np.tile([[1.5, -0.5]], (100_000, 1))
    x_t, _ = forward_perturb(SCHED, x1, t, Rng(2))
    mean = math.sqrt(SCHED.alpha_bar(t)) * np.array([1.5, -0.5])
    var = 1.0 - SCHED.alpha_bar(t)
    assert np.all(np.abs(x_t.mean(axis=0) - mean) <= 0.02)
    cov = np.cov(x_t.T)
    assert np.all(np.abs(np.diag(cov) - var) <= 0.02)
    assert abs(cov[0, 1]) <= 0.02


def test_perturb_rejects_time_out_of_range():
    with pytest.raises(ValueError):
        forward_perturb(SCHED, np.zeros((2, 2)), 1.5, Rng(0))
    with pytest.raises(ValueError):
        forward_perturb(SCHED, np.zeros((2, 2)), np.array([0.5, -0.1]), Rng(0))


# denoising score matching


def test_dsm_zero_for_oracle_predictor():
    rng = Rng(0)
    x1 = rng.normal((64, 2))
    t = rng.uniform(64) * 0.9 + 0.05
    eps = rng.normal((64, 2))
    ab = SCHED.alpha_bar(t)[:, None]
    oracle = FixedPredictor(lambda x, tt: (x - np.sqrt(ab) * x1) / np.sqrt(1 - ab))
    assert float(dsm_objective(oracle, SCHED, x1, t, eps)) == pytest.approx(0.0, abs=1e-20)


def test_dsm_zero_predictor_is_dimension():
    zero = FixedPredictor(lambda x, t: np.zeros_like(x))
    x1 = sample_data(Rng(0), DatasetSpec("two_moons"), 100_000)
    assert dsm_loss(zero, SCHED, x1, Rng(1)) == pytest.approx(2.0, abs=0.03)


def test_dsm_single_row():
    zero = FixedPredictor(lambda x, t: np.zeros_like(x))
    loss = dsm_objective(zero, SCHED, np.array([[0.3, 0.2]]), np.array([0.5]), np.array([[1.0, 0.0]]))
    assert float(loss) == 1.0


def test_dsm_nonnegative_and_shape_checked():
    model = init_score_model(Rng(0), 2, (8,))
    assert dsm_loss(model, SCHED, Rng(1).normal((32, 2)), Rng(2)) >= 0.0
    with pytest.raises(nc.ShapeError):
        dsm_loss(init_score_model(Rng(0), 3, (8,)), SCHED, np.zeros((4, 2)), Rng(0))


def test_dsm_gradient_matches_finite_differences():
    rng = Rng(11)
    model = init_score_model(rng, 2, (6,))
    x1, t, eps = 2 * rng.normal((3, 2)), 0.05 + 0.9 * rng.uniform(3), rng.normal((3, 2))
    arrays = model.params.arrays()

    def f(arrs):
        return dsm_objective(model, SCHED, x1, t, eps, nc.MlpParams.from_arrays(arrs))

    tape = nc.Tape()
    leaves = [tape.var(a) for a in arrays]
    analytic = tape.gradient(f(leaves), leaves)
    numeric = nc.finite_difference_grad(lambda a: float(f(a)), arrays)
    assert nc.gradient_mismatch(analytic, numeric) < 1e-3


# probability-flow drift


def test_standard_normal_prior_is_stationary():
    x = 3.0 * Rng(0).normal((200, 2))
    oracle = standard_normal_eps(SCHED)
    for t in (SCHED.t_min, 0.01, 0.37, 1.0):
        assert np.max(np.abs(pf_ode_drift(oracle, SCHED, x, t))) < 1e-12


def test_drift_zero_at_origin():
    model = FixedPredictor(lambda x, t: 5.0 * x)
    assert not pf_ode_drift(model, SCHED, np.zeros((3, 2)), 0.5).any()


def test_drift_with_unit_beta():
    flat = NoiseSchedule(beta_min=1.0, beta_max=1.0)
    zero = FixedPredictor(lambda x, t: np.zeros_like(x))
    assert pf_ode_drift(zero, flat, np.array([[2.0, 0.0]]), 0.7).tolist() == [[-1.0, 0.0]]


def test_drift_clamps_time():
    zero = FixedPredictor(lambda x, t: np.ones_like(x))
    x = np.ones((1, 2))
    assert np.array_equal(pf_ode_drift(zero, SCHED, x, 0.0), pf_ode_drift(zero, SCHED, x, SCHED.t_min))
    assert np.isfinite(pf_ode_drift(zero, SCHED, x, 0.0)).all()


# couplings


def test_revs_coupling_identity_for_stationary_prior():
    x0 = sample_prior(Rng(0), 100, 2)
    for steps in (1, 7, 50):
        x1 = generate_coupling_revs(standard_normal_eps(SCHED), SCHED, x0, steps)
        assert np.allclose(x1, x0, rtol=0, atol=1e-12)


@pytest.fixture(scope="module")
def small_guide():
    return train_diffusion(DatasetSpec("eight_gaussians"), SCHED, DiffusionConfig(400, 128, 2e-3, 0, (32, 32))).model


def test_revs_coupling_converges_in_steps(small_guide):
    x0 = sample_prior(Rng(3), 256, 2)
    a, b, c = (generate_coupling_revs(small_guide, SCHED, x0, s) for s in (1, 100, 200))
    gap_coarse = np.max(np.abs(a - b))
    gap_fine = np.max(np.abs(b - c))
    assert gap_coarse > 0
    assert gap_fine < gap_coarse


def test_revs_coupling_deterministic(small_guide):
    x0 = sample_prior(Rng(3), 64, 2)
    assert np.array_equal(generate_coupling_revs(small_guide, SCHED, x0, 20),
                          generate_coupling_revs(small_guide, SCHED, x0, 20))


def test_revs_coupling_rejects_zero_steps(small_guide):
    with pytest.raises(ValueError):
        generate_coupling_revs(small_guide, SCHED, np.zeros((1, 2)), 0)


def test_revs_coupling_non_finite_aborts():
    blowup = FixedPredictor(lambda x, t: np.full_like(x, np.inf))
    with pytest.raises(nc.NumericFault):
        generate_coupling_revs(blowup, SCHED, np.ones((2, 2)), 5)


def test_iii_coupling_with_zero_noise():
    x1 = Rng(0).normal((4, 2))
    x0 = generate_coupling_iii(SCHED, x1, eps=np.zeros_like(x1))
    assert np.allclose(x0, math.exp(-10.05 / 2) * x1, rtol=1e-12, atol=0)
    assert math.exp(-10.05 / 2) == pytest.approx(6.6e-3, rel=0.01)


def test_iii_coupling_is_standard_normal():
    x1 = sample_data(Rng(0), DatasetSpec("eight_gaussians"), 100_000)
    x0 = generate_coupling_iii(SCHED, x1, Rng(1))
    assert np.all(np.abs(x0.mean(axis=0)) <= 0.02)
    assert np.all(np.abs(x0.var(axis=0) - 1.0) <= 0.02)


def test_iii_coupling_is_stochastic():
    x1 = Rng(0).normal((10, 2))
    rng = Rng(1)
    assert not np.array_equal(generate_coupling_iii(SCHED, x1, rng), generate_coupling_iii(SCHED, x1, rng))


# training


def test_training_needs_iterations():
    with pytest.raises(ValueError):
        train_diffusion(DatasetSpec(), SCHED, DiffusionConfig(iterations=0))


def test_training_deterministic():
    cfg = DiffusionConfig(30, 32, 1e-3, 9, (16,))
    a = train_diffusion(DatasetSpec("spiral"), SCHED, cfg)
    b = train_diffusion(DatasetSpec("spiral"), SCHED, cfg)
    assert a.losses == b.losses
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.model.params.arrays(), b.model.params.arrays()))


def test_training_reduces_loss(small_guide):
    held_out = sample_data(Rng(99), DatasetSpec("eight_gaussians"), 20_000)
    assert dsm_loss(small_guide, SCHED, held_out, Rng(98)) < 2.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_last_good():
    with pytest.raises(TrainingDiverged) as info:
        train_diffusion(DatasetSpec(), SCHED, DiffusionConfig(50, 16, 1e300, 0, (8,)))
    assert isinstance(info.value.last_good, ScoreModel)
